use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use idg_core::engine::Mode;
use idg_core::gnn::GateMode;
use idg_core::synth::Shift;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "idg", version, about = "Causal-subgraph extraction for out-of-distribution graph classification")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic motif dataset with a basis or size shift.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on every split.
    Eval(EvalArgs),
    /// Rewire a fraction of edges and track activations, norms and accuracy.
    Probe(ProbeArgs),
    /// Singular value spectra of every weight matrix in a checkpoint.
    Svd(SvdArgs),
    /// Train/test embedding divergence of causal subgraphs versus full graphs.
    Divergence(DivergenceArgs),
    /// Train every ablation mode over shared data and seeds.
    Ablate(AblateArgs),
    /// Write per-graph embeddings for one split.
    ExportEmbeddings(ExportArgs),
}

/// Flags every subcommand takes.
#[derive(Clone, Debug, Args, Serialize)]
pub struct Common {
    /// Master seed; every random stream is derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory for the manifest and all outputs.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON object of flag values; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "basis")]
    pub shift: Shift,
    #[arg(long)]
    pub train_n: Option<usize>,
    #[arg(long)]
    pub val_n: Option<usize>,
    #[arg(long)]
    pub test_n: Option<usize>,
    /// Number of motif classes (1 to 3).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Smallest base size, applied to every split.
    #[arg(long)]
    pub base_min: Option<usize>,
    /// Largest base size, applied to every split.
    #[arg(long)]
    pub base_max: Option<usize>,
    /// Full generator config as JSON; the flags above override it.
    #[arg(long)]
    pub gen_config: Option<PathBuf>,
}

/// Hyperparameters shared by `train` and `ablate`.
#[derive(Debug, Args, Serialize)]
pub struct Hyper {
    #[arg(long, default_value_t = 0.1)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda2: f64,
    /// Fraction of edges kept by the extractor.
    #[arg(long, default_value_t = 0.5)]
    pub r: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Weight carried by kept edges: `soft` (their score) or `straight_through` (1).
    #[arg(long, default_value = "soft", value_parser = parse_gate)]
    pub gate: GateMode,
    /// Record real wall-clock times in metrics.csv instead of zeros.
    #[arg(long)]
    pub wall_clock: bool,
}

fn parse_gate(s: &str) -> Result<GateMode, String> {
    match s {
        "soft" => Ok(GateMode::Soft),
        "straight_through" | "straight-through" => Ok(GateMode::StraightThrough),
        _ => Err(format!("unknown gate {s:?} (expected soft or straight_through)")),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// idg, erm, erm_plus_norm, no_ce, no_comp or no_norm.
    #[arg(long, default_value = "idg")]
    pub mode: Mode,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file, or a run directory containing ckpt.json.
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Rewiring ratios, ascending within [0, 1].
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    pub ratios: Vec<f64>,
    /// Seeds averaged at every ratio.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub probe_seeds: Vec<u64>,
    /// Split whose graphs are perturbed.
    #[arg(long, default_value = "test")]
    pub split: SplitName,
}

#[derive(Debug, Args, Serialize)]
pub struct SvdArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DivergenceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Modes to run; all six by default.
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<Mode>,
    /// Training seeds; defaults to `--seed` alone.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Generate(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Probe(a) => &a.common,
            Command::Svd(a) => &a.common,
            Command::Divergence(a) => &a.common,
            Command::Ablate(a) => &a.common,
            Command::ExportEmbeddings(a) => &a.common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Probe(_) => "probe",
            Command::Svd(_) => "svd",
            Command::Divergence(_) => "divergence",
            Command::Ablate(_) => "ablate",
            Command::ExportEmbeddings(_) => "export-embeddings",
        }
    }

    /// Parsed arguments after defaults and config-file merging.
    pub fn resolved(&self) -> serde_json::Value {
        let v = match self {
            Command::Generate(a) => serde_json::to_value(a),
            Command::Train(a) => serde_json::to_value(a),
            Command::Eval(a) => serde_json::to_value(a),
            Command::Probe(a) => serde_json::to_value(a),
            Command::Svd(a) => serde_json::to_value(a),
            Command::Divergence(a) => serde_json::to_value(a),
            Command::Ablate(a) => serde_json::to_value(a),
            Command::ExportEmbeddings(a) => serde_json::to_value(a),
        };
        v.unwrap_or(serde_json::Value::Null)
    }
}
