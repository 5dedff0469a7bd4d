//! Loss terms, alternating two-stage training, the ERM baseline and
//! ablations, evaluation, and edge-level selection metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{model_forward, Batch, Bound, GateMode, Network, Role, SubgraphSelection};
use crate::graph::{Dataset, Graph, Split};
use crate::rng::substream;
use crate::tensor::{adam_step, AdamState, Axis, Matrix, Tape, Var};

pub const CKPT_SCHEMA: &str = "idg-ckpt/1";
pub const METRICS_HEADER: &str =
    "epoch,stage,train_loss,test_loss,train_acc,test_acc,mean_norm_train,mean_norm_test,wall_ms";
const EVAL_BATCH: usize = 128;
const COMP_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idg,
    Erm,
    ErmPlusNorm,
    NoCe,
    NoComp,
    NoNorm,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Idg, Mode::Erm, Mode::ErmPlusNorm, Mode::NoCe, Mode::NoComp, Mode::NoNorm];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Idg => "idg",
            Mode::Erm => "erm",
            Mode::ErmPlusNorm => "erm_plus_norm",
            Mode::NoCe => "no_ce",
            Mode::NoComp => "no_comp",
            Mode::NoNorm => "no_norm",
        }
    }

    /// Whether the mode trains an extractor at all.
    pub fn uses_extractor(self) -> bool {
        !matches!(self, Mode::Erm | Mode::ErmPlusNorm)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub r: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eps_norm: f64,
    pub layers: usize,
    pub hidden: usize,
    pub gate: GateMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Idg,
            lambda1: 0.1,
            lambda2: 0.01,
            r: 0.5,
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            eps_norm: 1e-8,
            layers: 3,
            hidden: 64,
            gate: GateMode::Soft,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) || !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad(format!("lambdas must be finite and ≥ 0 (got {}, {})", self.lambda1, self.lambda2));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return bad(format!("r = {} outside (0, 1]", self.r));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.eps_norm > 0.0) {
            return bad(format!("eps_norm {} must be positive", self.eps_norm));
        }
        if self.batch_size == 0 || self.layers == 0 || self.hidden == 0 {
            return bad("batch_size, layers and hidden must be ≥ 1".into());
        }
        Ok(())
    }
}

/// `-log(max(||h||, eps))` per row of `h_z`, averaged over rows.
pub fn norm_penalty(tape: &mut Tape, h_z: Var, eps_norm: f64) -> Result<Var> {
    let n = tape.l2_norm(h_z, Axis::Cols)?;
    let n = tape.clamp_min(n, eps_norm)?;
    let l = tape.log(n)?;
    let l = tape.mean(l, Axis::All)?;
    tape.scale(l, -1.0)
}

/// Mean binary entropy of the edge scores, clamped away from 0 and 1.
pub fn compactness(tape: &mut Tape, scores: Var) -> Result<Var> {
    let s = tape.clamp(scores, COMP_CLAMP, 1.0 - COMP_CLAMP)?;
    let t = tape.scale_shift(s, -1.0, 1.0)?;
    let ls = tape.log(s)?;
    let lt = tape.log(t)?;
    let a = tape.hadamard(s, ls)?;
    let b = tape.hadamard(t, lt)?;
    let sum = tape.add(a, b)?;
    let m = tape.mean(sum, Axis::All)?;
    tape.scale(m, -1.0)
}

/// The extractor objective for `mode`; terms with a zero coefficient are
/// left out of the graph. Returns `None` when no term remains.
pub fn extractor_loss(
    tape: &mut Tape,
    logits: Var,
    h_z: Var,
    scores: Var,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    if cfg.mode != Mode::NoCe {
        terms.push(tape.softmax_cross_entropy(logits, labels)?);
    }
    if cfg.mode != Mode::NoNorm && cfg.lambda1 != 0.0 {
        let n = norm_penalty(tape, h_z, cfg.eps_norm)?;
        terms.push(tape.scale(n, cfg.lambda1)?);
    }
    if cfg.mode != Mode::NoComp && cfg.lambda2 != 0.0 {
        let c = compactness(tape, scores)?;
        terms.push(tape.scale(c, cfg.lambda2)?);
    }
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else { return Ok(None) };
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(acc))
}

/// Batch-mean cross entropy of the predictor.
pub fn predictor_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Trained (or initial) parameters plus the configuration that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub extractor: Option<Network>,
    pub predictor: Network,
}

impl Checkpoint {
    pub fn init(cfg: &TrainConfig, d_in: usize, k: usize) -> Result<Self> {
        cfg.validate()?;
        let extractor = if cfg.mode.uses_extractor() {
            let mut rng = substream(cfg.seed, "init-extractor", 0);
            Some(Network::init(Role::Extractor, cfg.layers, d_in, cfg.hidden, 1, &mut rng)?)
        } else {
            None
        };
        let mut rng = substream(cfg.seed, "init-predictor", 0);
        let predictor = Network::init(Role::Predictor, cfg.layers, d_in, cfg.hidden, k, &mut rng)?;
        Ok(Checkpoint { config: cfg.clone(), extractor, predictor })
    }

    pub fn d_in(&self) -> usize {
        self.predictor.d_in
    }

    pub fn k(&self) -> usize {
        self.predictor.out_dim
    }

    pub fn networks(&self) -> impl Iterator<Item = &Network> {
        self.extractor.iter().chain(std::iter::once(&self.predictor))
    }

    fn check_data(&self, ds: &Dataset) -> Result<()> {
        if ds.d != self.d_in() {
            return Err(Error::dim("checkpoint features", (self.d_in(), self.k()), (ds.d, ds.k)));
        }
        if ds.k > self.k() {
            return Err(Error::dim("checkpoint classes", (self.d_in(), self.k()), (ds.d, ds.k)));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptJson {
    schema: String,
    config: TrainConfig,
    tensors: BTreeMap<String, TensorJson>,
}

pub fn checkpoint_to_string(ck: &Checkpoint) -> Result<String> {
    let mut tensors = BTreeMap::new();
    for net in ck.networks() {
        for (name, t) in net.names().into_iter().zip(&net.tensors) {
            tensors.insert(name, TensorJson { shape: [t.rows(), t.cols()], data: t.data().to_vec() });
        }
    }
    let file = CkptJson { schema: CKPT_SCHEMA.into(), config: ck.config.clone(), tensors };
    Ok(crate::json::to_string(&file)? + "\n")
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(ck)?)?;
    Ok(())
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let file: CkptJson = serde_json::from_str(text)?;
    if file.schema != CKPT_SCHEMA {
        return Err(Error::Schema { expected: CKPT_SCHEMA.into(), found: file.schema });
    }
    let cfg = file.config;
    cfg.validate()?;
    let mut tensors = file.tensors;
    let shape_of = |tensors: &BTreeMap<String, TensorJson>, name: &str| {
        tensors.get(name).map(|t| t.shape).ok_or_else(|| Error::Schema {
            expected: format!("tensor {name}"),
            found: "missing".into(),
        })
    };
    let [d_in, _] = shape_of(&tensors, "predictor.layer0.mlp0.weight")?;
    let [_, k] = shape_of(&tensors, "predictor.mlp2.1.weight")?;
    let mut take = |role: Role, out: usize| -> Result<Network> {
        let layout = Network::layout(role, cfg.layers, d_in, cfg.hidden, out);
        let mut mats = Vec::with_capacity(layout.len());
        for (name, _) in &layout {
            let t = tensors.remove(name).ok_or_else(|| Error::Schema {
                expected: format!("tensor {name}"),
                found: "missing".into(),
            })?;
            mats.push(Matrix::new(t.shape[0], t.shape[1], t.data)?);
        }
        Network::from_tensors(role, cfg.layers, d_in, cfg.hidden, out, mats)
    };
    let extractor = if cfg.mode.uses_extractor() { Some(take(Role::Extractor, 1)?) } else { None };
    let predictor = take(Role::Predictor, k)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Schema { expected: "no further tensors".into(), found: extra.clone() });
    }
    Ok(Checkpoint { config: cfg, extractor, predictor })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-graph outputs of a frozen model.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphOutput {
    pub logits: Vec<f64>,
    pub h_z: Vec<f64>,
    /// Mean absolute final-layer activation over the graph's nodes.
    pub mean_activation: f64,
    /// Edge scores and kept local edge indices, when the model selects.
    pub scores: Option<Vec<f64>>,
    pub kept: Option<Vec<usize>>,
}

impl GraphOutput {
    pub fn norm(&self) -> f64 {
        self.h_z.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn cross_entropy(&self, y: usize) -> f64 {
        let max = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = self.logits.iter().map(|v| (v - max).exp()).sum();
        max + sum.ln() - self.logits[y]
    }
}

/// Runs graphs through the model in fixed-size chunks. With
/// `use_extractor = false` the predictor sees every edge at weight 1.
pub fn infer(ck: &Checkpoint, graphs: &[&Graph], use_extractor: bool) -> Result<Vec<GraphOutput>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(EVAL_BATCH) {
        let batch = Batch::new(chunk)?;
        let mut tape = Tape::new();
        let theta = match (&ck.extractor, use_extractor) {
            (Some(net), true) => Some(net.bind(&mut tape, false)),
            _ => None,
        };
        let phi = ck.predictor.bind(&mut tape, false);
        let res = model_forward(&mut tape, &batch, theta.as_ref(), &phi, ck.config.r, ck.config.gate)?;
        let logits = tape.value(res.pred.logits);
        let h_z = tape.value(res.pred.h_z);
        let act = tape.value(res.pred.act);
        let scores = res.scores.map(|s| tape.value(s).data().to_vec());
        for g in 0..batch.len() {
            let nodes = batch.node_range(g);
            let cells = (nodes.len() * act.cols()) as f64;
            let total: f64 = nodes.clone().flat_map(|i| act.row(i).iter()).map(|v| v.abs()).sum();
            let edges = batch.edge_range(g);
            let off = edges.start;
            out.push(GraphOutput {
                logits: logits.row(g).to_vec(),
                h_z: h_z.row(g).to_vec(),
                mean_activation: total / cells,
                scores: scores.as_ref().map(|s| s[edges.clone()].to_vec()),
                kept: res.kept.as_ref().map(|k| edges.clone().filter(|&e| k[e]).map(|e| e - off).collect()),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_norm: f64,
    pub mean_activation: f64,
}

pub fn summarize(outputs: &[GraphOutput], labels: &[usize]) -> Result<Evaluation> {
    if outputs.is_empty() {
        return Err(Error::Domain("evaluation over zero graphs".into()));
    }
    let n = outputs.len() as f64;
    let mut e = Evaluation { loss: 0.0, accuracy: 0.0, mean_norm: 0.0, mean_activation: 0.0 };
    for (o, &y) in outputs.iter().zip(labels) {
        e.loss += o.cross_entropy(y);
        e.accuracy += f64::from(u8::from(o.predicted() == y));
        e.mean_norm += o.norm();
        e.mean_activation += o.mean_activation;
    }
    e.loss /= n;
    e.accuracy /= n;
    e.mean_norm /= n;
    e.mean_activation /= n;
    Ok(e)
}

/// Mean CE, accuracy, representation norm and activation on `indices`.
pub fn evaluate(ck: &Checkpoint, ds: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    ck.check_data(ds)?;
    let graphs = pick(ds, indices)?;
    let outputs = infer(ck, &graphs, true)?;
    let labels: Vec<usize> = graphs.iter().map(|g| g.y).collect();
    summarize(&outputs, &labels)
}

pub(crate) fn pick<'a>(ds: &'a Dataset, indices: &[usize]) -> Result<Vec<&'a Graph>> {
    indices
        .iter()
        .map(|&i| {
            ds.graphs
                .get(i)
                .ok_or_else(|| Error::Contract(format!("graph index {i} outside dataset of {}", ds.len())))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EdgeMetrics {
    pub acc: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Kept edges as positive predictions against a 0/1 ground-truth mask.
pub fn edge_metrics_graph(kept: &[usize], mask: &[u8]) -> Result<EdgeMetrics> {
    let mut pred = vec![false; mask.len()];
    for &e in kept {
        *pred.get_mut(e).ok_or_else(|| Error::Contract(format!("kept edge {e} outside mask of {}", mask.len())))? =
            true;
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(mask) {
        match (p, t == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(EdgeMetrics { acc: ratio(tp + tn, mask.len()), recall, precision, f1: f1_score(precision, recall) })
}

/// Per-graph metrics averaged over graphs.
pub fn edge_metrics(sel: &SubgraphSelection, masks: &[Option<&[u8]>]) -> Result<EdgeMetrics> {
    if sel.kept.len() != masks.len() {
        return Err(Error::dim("edge_metrics", (sel.kept.len(), 1), (masks.len(), 1)));
    }
    if masks.is_empty() {
        return Err(Error::Domain("edge metrics over zero graphs".into()));
    }
    let mut sum = EdgeMetrics::default();
    for (i, (kept, mask)) in sel.kept.iter().zip(masks).enumerate() {
        let mask = mask.ok_or_else(|| Error::Domain(format!("graph {i} has no ground-truth edge mask")))?;
        let m = edge_metrics_graph(kept, mask)?;
        sum.acc += m.acc;
        sum.recall += m.recall;
        sum.precision += m.precision;
        sum.f1 += m.f1;
    }
    let n = masks.len() as f64;
    Ok(EdgeMetrics { acc: sum.acc / n, recall: sum.recall / n, precision: sum.precision / n, f1: sum.f1 / n })
}

/// Selection quality of a trained extractor on `indices`.
pub fn edge_metrics_for(ck: &Checkpoint, ds: &Dataset, indices: &[usize]) -> Result<EdgeMetrics> {
    if ck.extractor.is_none() {
        return Err(Error::Domain(format!("mode {} has no extractor to select edges", ck.config.mode)));
    }
    let graphs = pick(ds, indices)?;
    let outputs = infer(ck, &graphs, true)?;
    let sel = SubgraphSelection {
        kept: outputs.iter().map(|o| o.kept.clone().unwrap_or_default()).collect(),
        weights: vec![],
        scores_all: vec![],
    };
    let masks: Vec<Option<&[u8]>> = graphs.iter().map(|g| g.gt_edge_mask.as_deref()).collect();
    edge_metrics(&sel, &masks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Predictor update with the extractor frozen.
    Predictor,
    /// Extractor update with the predictor frozen.
    Extractor,
    /// Single-network baseline update.
    Erm,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Predictor => "predictor",
            Stage::Extractor => "extractor",
            Stage::Erm => "erm",
        }
    }
}

/// Training-side values are running averages over the stage's batches;
/// `train_loss` is the cross entropy. Test values are measured after the
/// stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_norm_train: f64,
    pub mean_norm_test: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.stage.name(),
            self.train_loss,
            self.test_loss,
            self.train_acc,
            self.test_acc,
            self.mean_norm_train,
            self.mean_norm_test,
            self.wall_ms
        )
    }
}

/// Header plus one line per row; `keep_wall` false writes `wall_ms` as 0.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow], keep_wall: bool) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        let mut r = r.clone();
        if !keep_wall {
            r.wall_ms = 0;
        }
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Full record of a training run.
#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters at the best validation accuracy (earliest on ties).
    pub best: Checkpoint,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    /// Parameters after the last epoch.
    pub last: Checkpoint,
    pub history: Vec<MetricsRow>,
    /// Cross entropy of every predictor-side step, in order.
    pub step_losses: Vec<f64>,
}

/// Mutable training state for one run.
pub struct Trainer<'a> {
    ds: &'a Dataset,
    split: &'a Split,
    cfg: TrainConfig,
    pub model: Checkpoint,
    adam_theta: Option<AdamState>,
    adam_phi: AdamState,
    pub step_losses: Vec<f64>,
}

#[derive(Default)]
pub struct StageTotals {
    ce: f64,
    correct: usize,
    norm: f64,
    graphs: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, split: &'a Split, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        split.validate(ds.len())?;
        if split.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let model = Checkpoint::init(cfg, ds.d, ds.k)?;
        let adam_theta = model.extractor.as_ref().map(|n| AdamState::new(&n.tensors, cfg.lr));
        let adam_phi = AdamState::new(&model.predictor.tensors, cfg.lr);
        Ok(Trainer { ds, split, cfg: cfg.clone(), model, adam_theta, adam_phi, step_losses: Vec::new() })
    }

    fn order(&self, epoch: usize, slot: u64) -> Vec<usize> {
        let mut order = self.split.train.clone();
        let mut rng = substream(self.cfg.seed, "shuffle", epoch as u64 * 2 + slot);
        order.shuffle(&mut rng);
        order
    }

    pub fn step_batch(&mut self, stage: Stage, idx: &[usize], totals: &mut StageTotals) -> Result<()> {
        let graphs = pick(self.ds, idx)?;
        let batch = Batch::new(&graphs)?;
        let cfg = &self.cfg;
        let mut tape = Tape::new();
        let train_theta = stage == Stage::Extractor;
        let theta: Option<Bound> = self.model.extractor.as_ref().map(|n| n.bind(&mut tape, train_theta));
        let phi = self.model.predictor.bind(&mut tape, !train_theta);
        let out = model_forward(&mut tape, &batch, theta.as_ref(), &phi, cfg.r, cfg.gate)?;
        let ce = predictor_loss(&mut tape, out.pred.logits, &batch.y)?;

        let ce_value = tape.value(ce).item();
        totals.ce += ce_value * batch.len() as f64;
        totals.graphs += batch.len();
        let logits = tape.value(out.pred.logits);
        let h_z = tape.value(out.pred.h_z);
        for (g, &y) in batch.y.iter().enumerate() {
            totals.correct += usize::from(argmax(logits.row(g)) == y);
            totals.norm += h_z.row(g).iter().map(|v| v * v).sum::<f64>().sqrt();
        }

        let loss = match stage {
            Stage::Predictor => Some(ce),
            Stage::Erm => match cfg.mode {
                Mode::ErmPlusNorm if cfg.lambda1 != 0.0 => {
                    let n = norm_penalty(&mut tape, out.pred.h_z, cfg.eps_norm)?;
                    let n = tape.scale(n, cfg.lambda1)?;
                    Some(tape.add(ce, n)?)
                }
                _ => Some(ce),
            },
            Stage::Extractor => {
                let scores = out.scores.ok_or_else(|| Error::Contract("extractor stage without scores".into()))?;
                extractor_loss(&mut tape, out.pred.logits, out.pred.h_z, scores, &batch.y, cfg)?
            }
        };
        if stage != Stage::Extractor {
            self.step_losses.push(ce_value);
        }
        let Some(loss) = loss else { return Ok(()) };
        tape.backward(loss)?;
        match stage {
            Stage::Extractor => {
                let net = self.model.extractor.as_mut().expect("extractor stage needs an extractor");
                let grads = net.grads(&tape, theta.as_ref().unwrap());
                adam_step(&mut net.tensors, &grads, self.adam_theta.as_mut().unwrap())
            }
            _ => {
                let grads = self.model.predictor.grads(&tape, &phi);
                adam_step(&mut self.model.predictor.tensors, &grads, &mut self.adam_phi)
            }
        }
    }

    pub fn run_stage(&mut self, epoch: usize, stage: Stage) -> Result<MetricsRow> {
        let start = Instant::now();
        let slot = u64::from(stage == Stage::Extractor);
        let order = self.order(epoch, slot);
        let mut totals = StageTotals::default();
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            self.step_batch(stage, idx, &mut totals).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("epoch {epoch}, stage {}, batch {b}: {msg}", stage.name()))
                }
                other => other,
            })?;
        }
        let n = totals.graphs as f64;
        let (test_loss, test_acc, mean_norm_test) = if self.split.test.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let e = evaluate(&self.model, self.ds, &self.split.test)?;
            (e.loss, e.accuracy, e.mean_norm)
        };
        Ok(MetricsRow {
            epoch,
            stage,
            train_loss: totals.ce / n,
            test_loss,
            train_acc: totals.correct as f64 / n,
            test_acc,
            mean_norm_train: totals.norm / n,
            mean_norm_test,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// One epoch: predictor stage then extractor stage, or a single
    /// baseline stage for modes without an extractor.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<Vec<MetricsRow>> {
        if self.model.extractor.is_some() {
            Ok(vec![self.run_stage(epoch, Stage::Predictor)?, self.run_stage(epoch, Stage::Extractor)?])
        } else {
            Ok(vec![self.run_stage(epoch, Stage::Erm)?])
        }
    }
}

/// Trains for `cfg.epochs` epochs and keeps the best-validation model.
pub fn fit(ds: &Dataset, split: &Split, cfg: &TrainConfig) -> Result<FitResult> {
    fit_observed(ds, split, cfg, |_| {})
}

/// As [`fit`], calling `observe` with each metrics row as it is produced.
pub fn fit_observed(
    ds: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&MetricsRow),
) -> Result<FitResult> {
    let mut tr = Trainer::new(ds, split, cfg)?;
    let mut best = tr.model.clone();
    let mut best_epoch = None;
    let mut best_val_acc: Option<f64> = None;
    let mut history = Vec::with_capacity(cfg.epochs * 2);
    for epoch in 0..cfg.epochs {
        for row in tr.train_epoch(epoch)? {
            observe(&row);
            history.push(row);
        }
        let improved = if split.val.is_empty() {
            true
        } else {
            let acc = evaluate(&tr.model, ds, &split.val)?.accuracy;
            let better = best_val_acc.map_or(true, |b| acc > b);
            if better {
                best_val_acc = Some(acc);
            }
            better
        };
        if improved {
            best = tr.model.clone();
            best_epoch = Some(epoch);
        }
    }
    Ok(FitResult { best, best_epoch, best_val_acc, last: tr.model, history, step_losses: tr.step_losses })
}
