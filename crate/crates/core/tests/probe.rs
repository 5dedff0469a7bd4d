use idg_core::engine::{evaluate, fit, Checkpoint, Mode, TrainConfig};
use idg_core::graph::{Dataset, Split};
use idg_core::probe::*;
use idg_core::synth::{generate_dataset, GenConfig, Shift};

fn trained(mode: Mode) -> (Dataset, Split, Checkpoint) {
    let mut cfg = GenConfig::for_shift(Shift::Basis, 31);
    cfg.train.n = 36;
    cfg.val.n = 9;
    cfg.test.n = 12;
    let (ds, split) = generate_dataset(&cfg).unwrap();
    let tc = TrainConfig { mode, seed: 31, epochs: 2, layers: 2, hidden: 8, lr: 1e-2, ..Default::default() };
    let res = fit(&ds, &split, &tc).unwrap();
    (ds, split, res.best)
}

#[test]
fn ratio_zero_is_plain_evaluation() {
    let (ds, split, ck) = trained(Mode::Erm);
    let rows = norm_probe(&ck, &ds, &split.test, &[0.0, 0.3], &[1, 2]).unwrap();
    let e = evaluate(&ck, &ds, &split.test).unwrap();
    assert_eq!(rows[0].ratio, 0.0);
    assert_eq!((rows[0].mean_norm, rows[0].accuracy, rows[0].mean_activation), (e.mean_norm, e.accuracy, e.mean_activation));
    assert_ne!(rows[1].mean_norm, rows[0].mean_norm);
}

#[test]
fn probe_is_deterministic_and_seed_dependent() {
    let (ds, split, ck) = trained(Mode::Idg);
    let a = norm_probe(&ck, &ds, &split.test, &[0.0, 0.2, 0.4], &[5]).unwrap();
    let b = norm_probe(&ck, &ds, &split.test, &[0.0, 0.2, 0.4], &[5]).unwrap();
    assert_eq!(a, b);
    let c = norm_probe(&ck, &ds, &split.test, &[0.0, 0.2, 0.4], &[6]).unwrap();
    assert_ne!(a[2], c[2]);
}

#[test]
fn probe_rejects_bad_ratio_lists() {
    let (ds, split, ck) = trained(Mode::Erm);
    assert!(norm_probe(&ck, &ds, &split.test, &[0.3, 0.1], &[1]).is_err());
    assert!(norm_probe(&ck, &ds, &split.test, &[1.5], &[1]).is_err());
    assert!(norm_probe(&ck, &ds, &split.test, &[0.1], &[]).is_err());
}

#[test]
fn id_ood_report_matches_evaluations() {
    let (ds, split, ck) = trained(Mode::Erm);
    let n = id_ood_norms(&ck, &ds, &split.train, &split.test).unwrap();
    let id = evaluate(&ck, &ds, &split.train).unwrap();
    let ood = evaluate(&ck, &ds, &split.test).unwrap();
    assert_eq!((n.mean_norm_id, n.mean_act_id), (id.mean_norm, id.mean_activation));
    assert_eq!((n.mean_norm_ood, n.mean_act_ood), (ood.mean_norm, ood.mean_activation));
    let mut buf = Vec::new();
    write_idood_csv(&mut buf, &n).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), IDOOD_HEADER);
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn svd_covers_every_weight_matrix() {
    let (_, _, ck) = trained(Mode::Idg);
    let reports = svd_report(&ck).unwrap();
    // per network: 2 per GIN layer plus 2 head matrices
    assert_eq!(reports.len(), 2 * (2 * 2 + 2));
    for r in &reports {
        assert!(r.name.ends_with(".weight"));
        assert_eq!(r.values.len(), r.shape.0.min(r.shape.1));
        assert!(r.values.windows(2).all(|w| w[0] >= w[1]));
    }
    let mut buf = Vec::new();
    write_spectra_csv(&mut buf, &reports).unwrap();
    let total: usize = reports.iter().map(|r| r.values.len()).sum();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + total);
}

#[test]
fn divergence_of_a_split_with_itself_is_zero() {
    let (ds, split, ck) = trained(Mode::Erm);
    let d = divergence_check(&ck, &ds, &split.test, &split.test).unwrap();
    assert!(d.causal.abs() < 1e-9 && d.full.abs() < 1e-9, "{d:?}");
    let d = divergence_check(&ck, &ds, &split.train, &split.test).unwrap();
    assert!(d.full > 0.0);
    let mut buf = Vec::new();
    write_divergence_csv(&mut buf, &d).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], DIVERGENCE_HEADER);
    assert!(lines[1].starts_with("causal,") && lines[2].starts_with("full,"));
}

#[test]
fn embeddings_export_one_row_per_graph() {
    let (ds, split, ck) = trained(Mode::Idg);
    let mut buf = Vec::new();
    export_embeddings(&ck, &ds, &split.test, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], embeddings_header(8));
    assert_eq!(lines.len(), 1 + split.test.len());
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first.len(), 3 + 8);
    assert_eq!(first[0], ds.graphs[split.test[0]].id);
}
