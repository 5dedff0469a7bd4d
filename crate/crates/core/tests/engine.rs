use idg_core::engine::*;
use idg_core::gnn::{model_forward, Batch, Bound, GateMode, SubgraphSelection};
use idg_core::graph::{Dataset, Graph, Split};
use idg_core::rng::from_seed;
use idg_core::synth::{generate_dataset, random_graph, GenConfig, Shift};
use idg_core::tensor::{grad_check_sampled, Matrix, Tape};
use proptest::prelude::*;
use rand::Rng;

fn small_data(seed: u64) -> (Dataset, Split) {
    let mut cfg = GenConfig::for_shift(Shift::Basis, seed);
    cfg.train.n = 48;
    cfg.val.n = 12;
    cfg.test.n = 12;
    generate_dataset(&cfg).unwrap()
}

fn small_cfg(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig { mode, seed, epochs: 2, layers: 2, hidden: 8, batch_size: 16, lr: 1e-2, ..Default::default() }
}

fn scalar(t: &Tape, v: idg_core::tensor::Var) -> f64 {
    t.value(v).item()
}

#[test]
fn norm_penalty_reference_points() {
    let mut t = Tape::new();
    let one = t.constant(Matrix::row_vector(vec![0.6, 0.8]));
    let v = norm_penalty(&mut t, one, 1e-8).unwrap();
    assert!(scalar(&t, v).abs() < 1e-15);
    let e = t.constant(Matrix::row_vector(vec![std::f64::consts::E, 0.0]));
    let v = norm_penalty(&mut t, e, 1e-8).unwrap();
    assert!((scalar(&t, v) + 1.0).abs() < 1e-15);
    let z = t.constant(Matrix::zeros(1, 3));
    let v = norm_penalty(&mut t, z, 1e-8).unwrap();
    assert!((scalar(&t, v) - 18.420_680_743_952_367).abs() < 1e-9);
    // batch mean of per-row penalties
    let two = t.constant(Matrix::from_rows(&[[1.0, 0.0], [std::f64::consts::E, 0.0]]).unwrap());
    let v = norm_penalty(&mut t, two, 1e-8).unwrap();
    assert!((scalar(&t, v) + 0.5).abs() < 1e-15);
}

#[test]
fn compactness_reference_points() {
    let mut t = Tape::new();
    let half = t.constant(Matrix::column(vec![0.5]));
    let v = compactness(&mut t, half).unwrap();
    assert!((scalar(&t, v) - std::f64::consts::LN_2).abs() < 1e-15);
    let edge = t.constant(Matrix::column(vec![1e-12, 1.0]));
    let v = compactness(&mut t, edge).unwrap();
    assert!(scalar(&t, v) < 2e-6);
    let mixed = t.constant(Matrix::column(vec![0.5, 1.0 - 1e-7]));
    let v = compactness(&mut t, mixed).unwrap();
    assert!((scalar(&t, v) - std::f64::consts::LN_2 / 2.0).abs() < 1e-6);
}

#[test]
fn predictor_loss_reference_points() {
    let mut t = Tape::new();
    let uniform = t.constant(Matrix::zeros(2, 3));
    let v = predictor_loss(&mut t, uniform, &[0, 2]).unwrap();
    assert!((scalar(&t, v) - 3f64.ln()).abs() < 1e-15);
    let sharp = t.constant(Matrix::from_rows(&[[50.0, 0.0, 0.0]]).unwrap());
    let v = predictor_loss(&mut t, sharp, &[0]).unwrap();
    assert!(scalar(&t, v) < 1e-20);
}

fn extractor_terms(mode: Mode, l1: f64, l2: f64) -> (f64, f64, f64, f64) {
    let (ds, split) = small_data(3);
    let cfg = TrainConfig { mode, lambda1: l1, lambda2: l2, ..small_cfg(mode, 3) };
    let ck = Checkpoint::init(&cfg, ds.d, ds.k).unwrap();
    let graphs: Vec<&Graph> = split.train[..4].iter().map(|&i| &ds.graphs[i]).collect();
    let batch = Batch::new(&graphs).unwrap();
    let mut t = Tape::new();
    let theta = ck.extractor.as_ref().unwrap().bind(&mut t, true);
    let phi = ck.predictor.bind(&mut t, false);
    let out = model_forward(&mut t, &batch, Some(&theta), &phi, cfg.r, cfg.gate).unwrap();
    let scores = out.scores.unwrap();
    let total = extractor_loss(&mut t, out.pred.logits, out.pred.h_z, scores, &batch.y, &cfg).unwrap().unwrap();
    let ce = predictor_loss(&mut t, out.pred.logits, &batch.y).unwrap();
    let n = norm_penalty(&mut t, out.pred.h_z, cfg.eps_norm).unwrap();
    let c = compactness(&mut t, scores).unwrap();
    (scalar(&t, total), scalar(&t, ce), scalar(&t, n), scalar(&t, c))
}

#[test]
fn extractor_loss_term_selection() {
    let (total, ce, _, c) = extractor_terms(Mode::NoNorm, 0.1, 0.01);
    assert_eq!(total, ce + 0.01 * c);
    let (total, ce, _, _) = extractor_terms(Mode::Idg, 0.0, 0.0);
    assert_eq!(total, ce);
    let (total, ce, n, c) = extractor_terms(Mode::Idg, 0.1, 0.01);
    assert_eq!(total, ce + 0.1 * n + 0.01 * c);
    let (total, _, n, c) = extractor_terms(Mode::NoCe, 0.1, 0.01);
    assert_eq!(total, 0.1 * n + 0.01 * c);
    let (total, ce, n, _) = extractor_terms(Mode::NoComp, 0.1, 0.01);
    assert_eq!(total, ce + 0.1 * n);
}

fn random_small_graph(rng: &mut idg_core::rng::Rng, y: usize) -> Graph {
    let n = rng.gen_range(5..9);
    let m = rng.gen_range(n..(n * (n - 1) / 2).min(2 * n));
    let f = random_graph(n, m, rng).unwrap();
    let x = Matrix::new(n, 2, (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    Graph { id: String::new(), num_nodes: n, edges: f.edges, x, y, domain: "r".into(), gt_edge_mask: None }
}

#[test]
fn extractor_loss_gradient_matches_finite_differences() {
    let mut rng = from_seed(17);
    let cfg = TrainConfig { layers: 2, hidden: 5, ..Default::default() };
    let ck = Checkpoint::init(&cfg, 2, 3).unwrap();
    let theta = ck.extractor.clone().unwrap();
    let phi = ck.predictor.clone();
    let nt = theta.tensors.len();
    let graphs = [random_small_graph(&mut rng, 0), random_small_graph(&mut rng, 2)];
    let refs: Vec<&Graph> = graphs.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    // generic point: nonzero biases and eps keep every relu off its kink
    let mut params = theta.tensors.clone();
    params.extend(phi.tensors.iter().cloned());
    for p in params.iter_mut().filter(|p| p.rows() == 1) {
        for v in p.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    let f = |t: &mut Tape, vars: &[idg_core::tensor::Var]| {
        let tb = Bound::from_vars(cfg.layers, vars[..nt].to_vec())?;
        let pb = Bound::from_vars(cfg.layers, vars[nt..].to_vec())?;
        let out = model_forward(t, &batch, Some(&tb), &pb, cfg.r, GateMode::Soft)?;
        Ok(extractor_loss(t, out.pred.logits, out.pred.h_z, out.scores.unwrap(), &batch.y, &cfg)?.unwrap())
    };
    let report = grad_check_sampled(f, &params, 1e-6, usize::MAX).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn stages_freeze_the_other_network() {
    let (ds, split) = small_data(5);
    let cfg = small_cfg(Mode::Idg, 5);
    let mut tr = Trainer::new(&ds, &split, &cfg).unwrap();
    let theta0 = tr.model.extractor.clone().unwrap();
    let phi0 = tr.model.predictor.clone();
    tr.run_stage(0, Stage::Predictor).unwrap();
    assert_eq!(tr.model.extractor.as_ref().unwrap(), &theta0);
    assert_ne!(tr.model.predictor, phi0);
    let phi1 = tr.model.predictor.clone();
    tr.run_stage(0, Stage::Extractor).unwrap();
    assert_eq!(tr.model.predictor, phi1);
    assert_ne!(tr.model.extractor.as_ref().unwrap(), &theta0);
}

#[test]
fn zero_lambda_full_ratio_reduces_to_erm() {
    let (ds, split) = small_data(6);
    let idg = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        r: 1.0,
        gate: GateMode::StraightThrough,
        epochs: 3,
        ..small_cfg(Mode::Idg, 6)
    };
    let erm = TrainConfig { mode: Mode::Erm, ..idg.clone() };
    let a = fit(&ds, &split, &idg).unwrap();
    let b = fit(&ds, &split, &erm).unwrap();
    assert_eq!(a.step_losses.len(), b.step_losses.len());
    for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
        assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
    }
    assert_eq!(a.last.predictor, b.last.predictor);
}

fn strip_wall(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    rows.iter().cloned().map(|r| MetricsRow { wall_ms: 0, ..r }).collect()
}

#[test]
fn fit_is_deterministic() {
    let (ds, split) = small_data(7);
    let cfg = small_cfg(Mode::Idg, 7);
    let a = fit(&ds, &split, &cfg).unwrap();
    let b = fit(&ds, &split, &cfg).unwrap();
    assert_eq!(strip_wall(&a.history), strip_wall(&b.history));
    assert_eq!(checkpoint_to_string(&a.best).unwrap(), checkpoint_to_string(&b.best).unwrap());
    assert_eq!(a.history.len(), 4);
    assert_eq!(a.history[0].stage, Stage::Predictor);
    assert_eq!(a.history[1].stage, Stage::Extractor);
    let c = fit(&ds, &split, &TrainConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(strip_wall(&a.history), strip_wall(&c.history));
}

#[test]
fn zero_epochs_returns_initialization() {
    let (ds, split) = small_data(8);
    let cfg = TrainConfig { epochs: 0, ..small_cfg(Mode::Idg, 8) };
    let r = fit(&ds, &split, &cfg).unwrap();
    assert!(r.history.is_empty());
    assert_eq!(r.best, Checkpoint::init(&cfg, ds.d, ds.k).unwrap());
}

#[test]
fn erm_mode_has_no_extractor() {
    let (ds, split) = small_data(9);
    let r = fit(&ds, &split, &small_cfg(Mode::Erm, 9)).unwrap();
    assert!(r.best.extractor.is_none());
    assert!(r.history.iter().all(|row| row.stage == Stage::Erm));
    assert_eq!(r.history.len(), 2);
    assert!(matches!(edge_metrics_for(&r.best, &ds, &split.test), Err(idg_core::Error::Domain(_))));
}

#[test]
fn empty_training_split_is_rejected() {
    let (ds, mut split) = small_data(10);
    split.train.clear();
    assert!(fit(&ds, &split, &small_cfg(Mode::Idg, 1)).is_err());
    let bad = TrainConfig { r: 0.0, ..small_cfg(Mode::Idg, 1) };
    assert!(matches!(fit(&ds, &small_data(10).1, &bad), Err(idg_core::Error::Config(_))));
}

#[test]
fn constant_predictor_scores_one_third() {
    let (ds, split) = small_data(11);
    let mut ck = Checkpoint::init(&small_cfg(Mode::Erm, 11), ds.d, ds.k).unwrap();
    let n = ck.predictor.tensors.len();
    for t in &mut ck.predictor.tensors[n - 4..] {
        *t = Matrix::zeros(t.rows(), t.cols());
    }
    let e = evaluate(&ck, &ds, &split.test).unwrap();
    assert!((e.accuracy - 1.0 / 3.0).abs() < 1e-15);
    assert!((e.loss - 3f64.ln()).abs() < 1e-12);
    assert_eq!(e, evaluate(&ck, &ds, &split.test).unwrap());
}

#[test]
fn accuracy_matches_hand_count() {
    let (ds, split) = small_data(12);
    let r = fit(&ds, &split, &small_cfg(Mode::Idg, 12)).unwrap();
    let idx = &split.train[..10];
    let graphs: Vec<&Graph> = idx.iter().map(|&i| &ds.graphs[i]).collect();
    let batch = Batch::new(&graphs).unwrap();
    let mut t = Tape::new();
    let tb = r.best.extractor.as_ref().unwrap().bind(&mut t, false);
    let pb = r.best.predictor.bind(&mut t, false);
    let out = model_forward(&mut t, &batch, Some(&tb), &pb, 0.5, GateMode::Soft).unwrap();
    let logits = t.value(out.pred.logits);
    let mut hits = 0;
    for (g, gr) in graphs.iter().enumerate() {
        let row = logits.row(g);
        let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        hits += usize::from(best == gr.y);
    }
    let e = evaluate(&r.best, &ds, idx).unwrap();
    assert_eq!(e.accuracy, hits as f64 / 10.0);
}

#[test]
fn reported_f1_values() {
    assert!((f1_score(0.7381, 0.4444) - 0.5547).abs() <= 5e-4);
    assert!((f1_score(0.6907, 0.4004) - 0.5068).abs() <= 5e-4);
    assert_eq!(f1_score(0.0, 0.0), 0.0);
}

#[test]
fn perfect_selection_scores_one() {
    let m = edge_metrics_graph(&[1, 3], &[0, 1, 0, 1]).unwrap();
    assert_eq!(m, EdgeMetrics { acc: 1.0, recall: 1.0, precision: 1.0, f1: 1.0 });
    let sel = SubgraphSelection { kept: vec![vec![0], vec![1, 2]], weights: vec![], scores_all: vec![] };
    let a: &[u8] = &[1, 0];
    let b: &[u8] = &[0, 1, 0];
    let m = edge_metrics(&sel, &[Some(a), Some(b)]).unwrap();
    assert_eq!(m.recall, 1.0);
    assert_eq!(m.precision, 0.75);
    assert!(edge_metrics(&sel, &[Some(a), None]).is_err());
}

proptest! {
    #[test]
    fn f1_is_bounded(mask in prop::collection::vec(0u8..2, 1..30), seed in any::<u64>()) {
        let mut rng = from_seed(seed);
        let kept: Vec<usize> = (0..mask.len()).filter(|_| rng.gen_bool(0.5)).collect();
        let m = edge_metrics_graph(&kept, &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.f1));
        prop_assert!(m.f1 <= (2.0 * m.precision).min(2.0 * m.recall) + 1e-15);
        prop_assert!((0.0..=1.0).contains(&m.acc));
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (ds, split) = small_data(13);
    for mode in [Mode::Idg, Mode::Erm] {
        let r = fit(&ds, &split, &small_cfg(mode, 13)).unwrap();
        let text = checkpoint_to_string(&r.best).unwrap();
        let back = checkpoint_from_str(&text).unwrap();
        assert_eq!(back, r.best);
        assert_eq!(checkpoint_to_string(&back).unwrap(), text);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["schema"], "idg-ckpt/1");
        assert!(v["tensors"]["predictor.mlp2.1.weight"]["shape"].is_array());
    }
}

#[test]
fn checkpoint_errors() {
    let (ds, _) = small_data(14);
    let ck = Checkpoint::init(&small_cfg(Mode::Idg, 14), ds.d, ds.k).unwrap();
    let text = checkpoint_to_string(&ck).unwrap().replace("idg-ckpt/1", "idg-ckpt/0");
    assert!(matches!(checkpoint_from_str(&text), Err(idg_core::Error::Schema { .. })));
    let text = checkpoint_to_string(&ck).unwrap().replace("extractor.layer0.eps", "extractor.layer0.epz");
    assert!(checkpoint_from_str(&text).is_err());
    assert!(checkpoint_from_str("{").is_err());
}

#[test]
fn metrics_csv_layout() {
    let (ds, split) = small_data(15);
    let r = fit(&ds, &split, &small_cfg(Mode::Idg, 15)).unwrap();
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &r.history, false).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,predictor,"));
    assert!(lines[1].ends_with(",0"));
    for row in &r.history {
        assert!(row.train_loss.is_finite() && row.test_loss.is_finite());
        assert!((0.0..=1.0).contains(&row.train_acc) && (0.0..=1.0).contains(&row.test_acc));
    }
}
