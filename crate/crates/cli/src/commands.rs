use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use idg_core::engine::{
    edge_metrics_for, evaluate, fit_observed, read_checkpoint, write_checkpoint, write_metrics_csv, Checkpoint,
    FitResult, Mode, TrainConfig,
};
use idg_core::graph::{read_dataset, write_dataset, Dataset, Split};
use idg_core::probe::{
    divergence_check, export_embeddings, id_ood_norms, norm_probe, svd_report, write_divergence_csv,
    write_idood_csv, write_probe_csv, write_spectra_csv,
};
use idg_core::synth::{generate_dataset, GenConfig, MotifKind};
use serde_json::{json, Value};

use crate::args::{
    AblateArgs, Command, DivergenceArgs, EvalArgs, ExportArgs, GenerateArgs, Hyper, ProbeArgs, SplitName, SvdArgs,
    TrainArgs,
};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const ABLATION_HEADER: &str =
    "mode,seed,best_epoch,val_acc,test_acc,test_loss,edge_acc,edge_recall,edge_precision,edge_f1";

/// Files written (relative to `--out`) and a short JSON summary.
#[derive(Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<String>,
    pub summary: Value,
}

pub fn run(cmd: &Command) -> Result<Outcome> {
    std::fs::create_dir_all(&cmd.common().out)
        .with_context(|| format!("creating {}", cmd.common().out.display()))?;
    match cmd {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Probe(a) => probe(a),
        Command::Svd(a) => svd(a),
        Command::Divergence(a) => divergence(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportEmbeddings(a) => export(a),
    }
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = out.join(name);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn finish(mut w: BufWriter<File>) -> Result<()> {
    w.flush()?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<(Dataset, Split)> {
    let ds = read_dataset(&dir.join(DATASET_FILE)).with_context(|| format!("reading {}", dir.display()))?;
    let text = std::fs::read_to_string(dir.join(SPLIT_FILE))
        .with_context(|| format!("reading {}", dir.join(SPLIT_FILE).display()))?;
    let split: Split = serde_json::from_str(&text).context("parsing split.json")?;
    split.validate(ds.len())?;
    Ok((ds, split))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    let file: PathBuf = if path.is_dir() { path.join("ckpt.json") } else { path.to_path_buf() };
    read_checkpoint(&file).with_context(|| format!("reading checkpoint {}", file.display()))
}

fn indices(split: &Split, name: SplitName) -> &[usize] {
    match name {
        SplitName::Train => &split.train,
        SplitName::Val => &split.val,
        SplitName::Test => &split.test,
    }
}

fn generate(a: &GenerateArgs) -> Result<Outcome> {
    let mut cfg = match &a.gen_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<GenConfig>(&text).context("parsing generator config")?
        }
        None => GenConfig::for_shift(a.shift, a.common.seed),
    };
    cfg.master_seed = a.common.seed;
    if let Some(n) = a.train_n {
        cfg.train.n = n;
    }
    if let Some(n) = a.val_n {
        cfg.val.n = n;
    }
    if let Some(n) = a.test_n {
        cfg.test.n = n;
    }
    if let Some(k) = a.classes {
        if k == 0 || k > MotifKind::ALL.len() {
            bail!("--classes must be between 1 and {}", MotifKind::ALL.len());
        }
        cfg.motif_classes = MotifKind::ALL[..k].to_vec();
    }
    for s in [&mut cfg.train, &mut cfg.val, &mut cfg.test] {
        if let Some(lo) = a.base_min {
            s.sizes.0 = lo;
        }
        if let Some(hi) = a.base_max {
            s.sizes.1 = hi;
        }
    }
    let (ds, split) = generate_dataset(&cfg)?;
    let out = &a.common.out;
    write_dataset(&ds, &out.join(DATASET_FILE))?;
    std::fs::write(out.join(SPLIT_FILE), serde_json::to_string_pretty(&split)? + "\n")?;
    let mut domains: BTreeMap<&str, usize> = BTreeMap::new();
    for g in &ds.graphs {
        *domains.entry(g.domain.as_str()).or_default() += 1;
    }
    Ok(Outcome {
        artifacts: vec![DATASET_FILE.into(), SPLIT_FILE.into()],
        summary: json!({
            "generator": cfg,
            "graphs": ds.len(),
            "train": split.train.len(),
            "val": split.val.len(),
            "test": split.test.len(),
            "domains": domains,
        }),
    })
}

fn train_config(mode: Mode, seed: u64, h: &Hyper) -> TrainConfig {
    TrainConfig {
        mode,
        lambda1: h.lambda1,
        lambda2: h.lambda2,
        r: h.r,
        lr: h.lr,
        batch_size: h.batch,
        epochs: h.epochs,
        seed,
        layers: h.layers,
        hidden: h.hidden,
        gate: h.gate,
        ..TrainConfig::default()
    }
}

/// Trains one model into `dir` (relative to `out`) and returns its summary.
fn train_one(
    ds: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
    out: &Path,
    dir: &str,
    wall_clock: bool,
    artifacts: &mut Vec<String>,
) -> Result<(FitResult, Value)> {
    cfg.validate()?;
    let label = format!("{} seed {}", cfg.mode, cfg.seed);
    let fit = fit_observed(ds, split, cfg, |row| eprintln!("[{label}] {}", row.csv_line()))?;
    let rel = |name: &str| if dir.is_empty() { name.to_string() } else { format!("{dir}/{name}") };

    std::fs::create_dir_all(out.join(dir))?;
    let ckpt = rel("ckpt.json");
    write_checkpoint(&fit.best, &out.join(&ckpt))?;
    let metrics = rel("metrics.csv");
    let mut w = create(out, &metrics)?;
    write_metrics_csv(&mut w, &fit.history, wall_clock)?;
    finish(w)?;
    artifacts.extend([ckpt, metrics]);

    let test = evaluate(&fit.best, ds, &split.test)?;
    let edges = if fit.best.extractor.is_some() && has_masks(ds, &split.test) {
        Some(edge_metrics_for(&fit.best, ds, &split.test)?)
    } else {
        None
    };
    let summary = json!({
        "mode": cfg.mode,
        "seed": cfg.seed,
        "best_epoch": fit.best_epoch,
        "best_val_acc": fit.best_val_acc,
        "test": test,
        "edge_metrics": edges,
        "final_test_loss": fit.history.last().map(|r| r.test_loss),
    });
    Ok((fit, summary))
}

fn has_masks(ds: &Dataset, idx: &[usize]) -> bool {
    !idx.is_empty() && idx.iter().all(|&i| ds.graphs[i].gt_edge_mask.is_some())
}

fn train(a: &TrainArgs) -> Result<Outcome> {
    let (ds, split) = load_data(&a.data)?;
    let cfg = train_config(a.mode, a.common.seed, &a.hyper);
    let mut artifacts = Vec::new();
    let (_, summary) = train_one(&ds, &split, &cfg, &a.common.out, "", a.hyper.wall_clock, &mut artifacts)?;
    Ok(Outcome { artifacts, summary: json!({ "train_config": cfg, "result": summary }) })
}

fn eval(a: &EvalArgs) -> Result<Outcome> {
    let (ds, split) = load_data(&a.data)?;
    let ck = load_ckpt(&a.ckpt)?;
    let mut report = serde_json::Map::new();
    for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        if idx.is_empty() {
            continue;
        }
        let e = evaluate(&ck, &ds, idx)?;
        let edges = if ck.extractor.is_some() && has_masks(&ds, idx) {
            Some(edge_metrics_for(&ck, &ds, idx)?)
        } else {
            None
        };
        let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in idx.iter() {
            by_domain.entry(ds.graphs[i].domain.as_str()).or_default().push(i);
        }
        let mut domains = serde_json::Map::new();
        for (d, members) in by_domain {
            domains.insert(d.to_string(), serde_json::to_value(evaluate(&ck, &ds, &members)?)?);
        }
        report.insert(name.into(), json!({ "overall": e, "edge_metrics": edges, "domains": domains }));
    }
    let report = Value::Object(report);
    std::fs::write(a.common.out.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(Outcome { artifacts: vec!["eval.json".into()], summary: report })
}

fn probe(a: &ProbeArgs) -> Result<Outcome> {
    let (ds, split) = load_data(&a.data)?;
    let ck = load_ckpt(&a.ckpt)?;
    let rows = norm_probe(&ck, &ds, indices(&split, a.split), &a.ratios, &a.probe_seeds)?;
    let mut w = create(&a.common.out, "probe.csv")?;
    write_probe_csv(&mut w, &rows)?;
    finish(w)?;
    let norms = id_ood_norms(&ck, &ds, &split.train, &split.test)?;
    let mut w = create(&a.common.out, "idood.csv")?;
    write_idood_csv(&mut w, &norms)?;
    finish(w)?;
    Ok(Outcome {
        artifacts: vec!["probe.csv".into(), "idood.csv".into()],
        summary: json!({ "probe": rows, "id_ood": norms }),
    })
}

fn svd(a: &SvdArgs) -> Result<Outcome> {
    let ck = load_ckpt(&a.ckpt)?;
    let reports = svd_report(&ck)?;
    let mut w = create(&a.common.out, "spectra.csv")?;
    write_spectra_csv(&mut w, &reports)?;
    finish(w)?;
    let ranks: BTreeMap<&str, Value> = reports
        .iter()
        .map(|r| {
            (
                r.name.as_str(),
                json!({ "shape": r.shape, "effective_rank": r.effective_rank, "energy_fraction": r.energy_fraction }),
            )
        })
        .collect();
    Ok(Outcome { artifacts: vec!["spectra.csv".into()], summary: json!({ "matrices": ranks }) })
}

fn divergence(a: &DivergenceArgs) -> Result<Outcome> {
    let (ds, split) = load_data(&a.data)?;
    let ck = load_ckpt(&a.ckpt)?;
    let report = divergence_check(&ck, &ds, &split.train, &split.test)?;
    let mut w = create(&a.common.out, "divergence.csv")?;
    write_divergence_csv(&mut w, &report)?;
    finish(w)?;
    Ok(Outcome { artifacts: vec!["divergence.csv".into()], summary: serde_json::to_value(&report)? })
}

fn export(a: &ExportArgs) -> Result<Outcome> {
    let (ds, split) = load_data(&a.data)?;
    let ck = load_ckpt(&a.ckpt)?;
    let idx = indices(&split, a.split);
    let mut w = create(&a.common.out, "embeddings.csv")?;
    export_embeddings(&ck, &ds, idx, &mut w)?;
    finish(w)?;
    Ok(Outcome { artifacts: vec!["embeddings.csv".into()], summary: json!({ "graphs": idx.len() }) })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn ablate(a: &AblateArgs) -> Result<Outcome> {
    let (ds, split) = load_data(&a.data)?;
    let modes = if a.modes.is_empty() { Mode::ALL.to_vec() } else { a.modes.clone() };
    let seeds = if a.seeds.is_empty() { vec![a.common.seed] } else { a.seeds.clone() };
    for &m in &modes {
        train_config(m, 0, &a.hyper).validate()?;
    }
    let out = &a.common.out;
    let mut artifacts = Vec::new();
    let mut lines = vec![ABLATION_HEADER.to_string()];
    let mut runs = Vec::new();
    for &mode in &modes {
        for &seed in &seeds {
            let cfg = train_config(mode, seed, &a.hyper);
            let dir = format!("{}-s{seed}", mode.name());
            let (fit, summary) = train_one(&ds, &split, &cfg, out, &dir, a.hyper.wall_clock, &mut artifacts)?;
            let test = evaluate(&fit.best, &ds, &split.test)?;
            let edges = if fit.best.extractor.is_some() && has_masks(&ds, &split.test) {
                Some(edge_metrics_for(&fit.best, &ds, &split.test)?)
            } else {
                None
            };
            lines.push(format!(
                "{},{seed},{},{},{},{},{},{},{},{}",
                mode.name(),
                fit.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                opt(fit.best_val_acc),
                test.accuracy,
                test.loss,
                opt(edges.map(|e| e.acc)),
                opt(edges.map(|e| e.recall)),
                opt(edges.map(|e| e.precision)),
                opt(edges.map(|e| e.f1)),
            ));
            runs.push(summary);
        }
    }
    std::fs::write(out.join("ablation.csv"), lines.join("\n") + "\n")?;
    artifacts.push("ablation.csv".into());
    Ok(Outcome { artifacts, summary: json!({ "runs": runs }) })
}
