//! GIN backbones for the extractor (edge scoring and Top-r selection) and
//! the predictor (gated message passing, readout, classifier head).

use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;
use crate::tensor::{Matrix, Tape, Var};

const PER_LAYER: usize = 5;
const HEAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Extractor,
    Predictor,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Extractor => "extractor",
            Role::Predictor => "predictor",
        }
    }

    fn head(self) -> &'static str {
        match self {
            Role::Extractor => "mlp1",
            Role::Predictor => "mlp2",
        }
    }
}

/// All parameters of one GIN network, stored flat in canonical order:
/// per layer `eps, mlp0.weight, mlp0.bias, mlp1.weight, mlp1.bias`, then
/// the head `0.weight, 0.bias, 1.weight, 1.bias`.
///
/// The extractor head maps `2*d_h -> d_h -> 1`, the predictor head
/// `d_h -> d_h -> k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub role: Role,
    pub layers: usize,
    pub d_in: usize,
    pub d_h: usize,
    pub out_dim: usize,
    pub tensors: Vec<Matrix>,
}

pub type ExtractorParams = Network;
pub type PredictorParams = Network;

impl Network {
    /// Canonical `(name, shape)` list.
    pub fn layout(role: Role, layers: usize, d_in: usize, d_h: usize, out_dim: usize) -> Vec<(String, (usize, usize))> {
        let p = role.prefix();
        let mut out = Vec::with_capacity(layers * PER_LAYER + HEAD);
        for i in 0..layers {
            let din = if i == 0 { d_in } else { d_h };
            out.push((format!("{p}.layer{i}.eps"), (1, 1)));
            out.push((format!("{p}.layer{i}.mlp0.weight"), (din, d_h)));
            out.push((format!("{p}.layer{i}.mlp0.bias"), (1, d_h)));
            out.push((format!("{p}.layer{i}.mlp1.weight"), (d_h, d_h)));
            out.push((format!("{p}.layer{i}.mlp1.bias"), (1, d_h)));
        }
        let head_in = match role {
            Role::Extractor => 2 * d_h,
            Role::Predictor => d_h,
        };
        let h = role.head();
        out.push((format!("{p}.{h}.0.weight"), (head_in, d_h)));
        out.push((format!("{p}.{h}.0.bias"), (1, d_h)));
        out.push((format!("{p}.{h}.1.weight"), (d_h, out_dim)));
        out.push((format!("{p}.{h}.1.bias"), (1, out_dim)));
        out
    }

    fn check_dims(layers: usize, d_in: usize, d_h: usize, out_dim: usize) -> Result<()> {
        if layers == 0 || d_in == 0 || d_h == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "network dimensions must be positive (layers {layers}, d_in {d_in}, d_h {d_h}, out {out_dim})"
            )));
        }
        Ok(())
    }

    /// Xavier-uniform weights, zero biases, `eps = 0`.
    pub fn init(role: Role, layers: usize, d_in: usize, d_h: usize, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::check_dims(layers, d_in, d_h, out_dim)?;
        let tensors = Self::layout(role, layers, d_in, d_h, out_dim)
            .into_iter()
            .map(|(name, (r, c))| {
                if name.ends_with(".weight") {
                    let a = (6.0 / (r + c) as f64).sqrt();
                    let data = (0..r * c).map(|_| rng.gen_range(-a..a)).collect();
                    Matrix::new(r, c, data).expect("layout shape")
                } else {
                    Matrix::zeros(r, c)
                }
            })
            .collect();
        Ok(Network { role, layers, d_in, d_h, out_dim, tensors })
    }

    pub fn from_tensors(
        role: Role,
        layers: usize,
        d_in: usize,
        d_h: usize,
        out_dim: usize,
        tensors: Vec<Matrix>,
    ) -> Result<Self> {
        Self::check_dims(layers, d_in, d_h, out_dim)?;
        let layout = Self::layout(role, layers, d_in, d_h, out_dim);
        if layout.len() != tensors.len() {
            return Err(Error::Schema {
                expected: format!("{} tensors", layout.len()),
                found: format!("{} tensors", tensors.len()),
            });
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != *shape {
                return Err(Error::Schema {
                    expected: format!("{name} with shape {shape:?}"),
                    found: format!("shape {:?}", t.shape()),
                });
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("{name} has non-finite entries")));
            }
        }
        Ok(Network { role, layers, d_in, d_h, out_dim, tensors })
    }

    pub fn names(&self) -> Vec<String> {
        Self::layout(self.role, self.layers, self.d_in, self.d_h, self.out_dim)
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    /// Registers every tensor on the tape, as trainable parameters or as
    /// constants when the network is frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Bound { layers: self.layers, vars }
    }

    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Matrix> {
        bound.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// A network's tensors as tape variables.
#[derive(Clone, Debug)]
pub struct Bound {
    layers: usize,
    pub vars: Vec<Var>,
}

/// Tape handles of one GIN layer.
#[derive(Clone, Copy, Debug)]
pub struct GinLayerParams {
    pub eps: Var,
    pub w0: Var,
    pub b0: Var,
    pub w1: Var,
    pub b1: Var,
}

/// Tape handles of a two-transform head.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub w0: Var,
    pub b0: Var,
    pub w1: Var,
    pub b1: Var,
}

impl Bound {
    /// Wraps variables already on a tape, in canonical order.
    pub fn from_vars(layers: usize, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != layers * PER_LAYER + HEAD {
            return Err(Error::Contract(format!(
                "{} variables for a {layers}-layer network (want {})",
                vars.len(),
                layers * PER_LAYER + HEAD
            )));
        }
        Ok(Bound { layers, vars })
    }

    pub fn layer(&self, i: usize) -> GinLayerParams {
        let v = &self.vars[i * PER_LAYER..(i + 1) * PER_LAYER];
        GinLayerParams { eps: v[0], w0: v[1], b0: v[2], w1: v[3], b1: v[4] }
    }

    pub fn head(&self) -> HeadParams {
        let v = &self.vars[self.layers * PER_LAYER..];
        HeadParams { w0: v[0], b0: v[1], w1: v[2], b1: v[3] }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
}

/// Disjoint union of graphs with node and edge offsets per member.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub edges: Rc<[(usize, usize)]>,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub node_offsets: Vec<usize>,
    pub edge_offsets: Vec<usize>,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(graphs: &[&Graph]) -> Result<Self> {
        let first = graphs.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let d = first.feature_dim();
        let n: usize = graphs.iter().map(|g| g.num_nodes).sum();
        let m: usize = graphs.iter().map(|g| g.edges.len()).sum();
        let mut x = Vec::with_capacity(n * d);
        let mut edges = Vec::with_capacity(m);
        let mut node_offsets = vec![0];
        let mut edge_offsets = vec![0];
        for g in graphs {
            if g.feature_dim() != d {
                return Err(Error::dim("batch features", (g.num_nodes, d), g.x.shape()));
            }
            let off = *node_offsets.last().unwrap();
            x.extend_from_slice(g.x.data());
            edges.extend(g.edges.iter().map(|&(u, v)| (u + off, v + off)));
            node_offsets.push(off + g.num_nodes);
            edge_offsets.push(edges.len());
        }
        let src: Rc<[usize]> = edges.iter().map(|e| e.0).collect();
        let dst: Rc<[usize]> = edges.iter().map(|e| e.1).collect();
        Ok(Batch {
            x: Matrix::new(n, d, x)?,
            edges: edges.into(),
            src,
            dst,
            node_offsets,
            edge_offsets,
            y: graphs.iter().map(|g| g.y).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.x.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_range(&self, g: usize) -> std::ops::Range<usize> {
        self.edge_offsets[g]..self.edge_offsets[g + 1]
    }

    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        self.node_offsets[g]..self.node_offsets[g + 1]
    }

    /// Per graph, the nodes touching at least one edge of positive weight,
    /// or all of its nodes when there are none.
    pub fn active_groups(&self, weights: &[f64]) -> Vec<Vec<usize>> {
        let mut active = vec![false; self.num_nodes()];
        for (&(u, v), &w) in self.edges.iter().zip(weights) {
            if w > 0.0 {
                active[u] = true;
                active[v] = true;
            }
        }
        (0..self.len())
            .map(|g| {
                let r = self.node_range(g);
                let picked: Vec<usize> = r.clone().filter(|&i| active[i]).collect();
                if picked.is_empty() {
                    r.collect()
                } else {
                    picked
                }
            })
            .collect()
    }
}

/// `relu(W1 relu(W0 ((1+eps) h + sum_u w_uv h_u) + b0) + b1)`.
pub fn gin_layer_forward(
    tape: &mut Tape,
    h: Var,
    weights: Var,
    edges: Rc<[(usize, usize)]>,
    p: &GinLayerParams,
) -> Result<Var> {
    let w = tape.value(weights);
    if let Some(bad) = w.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("edge weight {bad} is not finite")));
    }
    let agg = tape.message_pass(h, weights, edges)?;
    let eh = tape.mul_scalar(h, p.eps)?;
    let z = tape.add(h, eh)?;
    let z = tape.add(z, agg)?;
    let a = tape.matmul(z, p.w0)?;
    let a = tape.add_row(a, p.b0)?;
    let a = tape.relu(a)?;
    let a = tape.matmul(a, p.w1)?;
    let a = tape.add_row(a, p.b1)?;
    tape.relu(a)
}

fn gin_stack(tape: &mut Tape, x: Var, weights: Var, edges: &Rc<[(usize, usize)]>, bound: &Bound) -> Result<Var> {
    let mut h = x;
    for i in 0..bound.layers() {
        h = gin_layer_forward(tape, h, weights, edges.clone(), &bound.layer(i))?;
    }
    Ok(h)
}

/// Node embeddings `H_G` with every edge at weight 1.
pub fn extractor_forward(tape: &mut Tape, batch: &Batch, theta: &Bound) -> Result<Var> {
    let x = tape.constant(batch.x.clone());
    let ones = tape.constant(Matrix::ones(batch.num_edges(), 1));
    gin_stack(tape, x, ones, &batch.edges, theta)
}

/// `sigmoid(MLP1([H_u || H_v]))` for every edge, `m x 1`.
///
/// The first transform is split into the halves acting on `H_u` and `H_v`,
/// so node rows are projected once and then gathered per edge.
pub fn score_edges(tape: &mut Tape, h: Var, batch: &Batch, theta: &Bound) -> Result<Var> {
    let hd = tape.shape(h).1;
    let head = theta.head();
    if tape.shape(head.w0).0 != 2 * hd {
        return Err(Error::dim("score_edges", (2 * hd, hd), tape.shape(head.w0)));
    }
    let w_top = tape.slice_rows(head.w0, 0, hd)?;
    let w_bot = tape.slice_rows(head.w0, hd, 2 * hd)?;
    let p = tape.matmul(h, w_top)?;
    let q = tape.matmul(h, w_bot)?;
    let pu = tape.gather_rows(p, batch.src.clone())?;
    let qv = tape.gather_rows(q, batch.dst.clone())?;
    let a = tape.add(pu, qv)?;
    let a = tape.add_row(a, head.b0)?;
    let a = tape.relu(a)?;
    let a = tape.matmul(a, head.w1)?;
    let a = tape.add_row(a, head.b1)?;
    tape.sigmoid(a)
}

/// `ceil(r * m)`, guarding against `r * m` landing just above an integer.
pub fn kept_count(m: usize, r: f64) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Config(format!("selection ratio r = {r} outside (0, 1]")));
    }
    let k = (r * m as f64 - 1e-9).ceil().max(0.0) as usize;
    Ok(k.clamp(usize::from(m > 0), m))
}

/// Indices (ascending) of the `ceil(r * m)` highest scores; equal scores
/// prefer the lower index.
pub fn select_top_r(scores: &[f64], r: f64) -> Result<Vec<usize>> {
    let k = kept_count(scores.len(), r)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Per-graph Top-r over a batch, as a mask over all batch edges.
pub fn select_batch(scores: &[f64], batch: &Batch, r: f64) -> Result<Rc<[bool]>> {
    if scores.len() != batch.num_edges() {
        return Err(Error::dim("select_batch", (batch.num_edges(), 1), (scores.len(), 1)));
    }
    let mut mask = vec![false; scores.len()];
    for g in 0..batch.len() {
        let range = batch.edge_range(g);
        let off = range.start;
        for i in select_top_r(&scores[range], r)? {
            mask[off + i] = true;
        }
    }
    Ok(mask.into())
}

/// Per-graph view of a selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphSelection {
    /// Kept local edge indices per graph, ascending.
    pub kept: Vec<Vec<usize>>,
    /// Scores of the kept edges, aligned with `kept`.
    pub weights: Vec<Vec<f64>>,
    /// Scores of every edge per graph.
    pub scores_all: Vec<Vec<f64>>,
}

impl SubgraphSelection {
    pub fn from_batch(batch: &Batch, scores: &[f64], mask: &[bool]) -> Self {
        let mut sel = SubgraphSelection { kept: vec![], weights: vec![], scores_all: vec![] };
        for g in 0..batch.len() {
            let range = batch.edge_range(g);
            let off = range.start;
            let kept: Vec<usize> = range.clone().filter(|&e| mask[e]).map(|e| e - off).collect();
            sel.weights.push(kept.iter().map(|&i| scores[off + i]).collect());
            sel.kept.push(kept);
            sel.scores_all.push(scores[range].to_vec());
        }
        sel
    }
}

/// Predictor outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PredictorOut {
    /// Pooled representation, one row per graph.
    pub h_z: Var,
    pub logits: Var,
    /// Final GIN layer output (post-relu), one row per node.
    pub act: Var,
}

/// GIN stack under per-edge `weights` (`m x 1`), mean readout over active
/// nodes, then the classifier head.
pub fn predictor_forward(tape: &mut Tape, batch: &Batch, weights: Var, phi: &Bound) -> Result<PredictorOut> {
    if tape.shape(weights) != (batch.num_edges(), 1) {
        return Err(Error::dim("predictor_forward", (batch.num_edges(), 1), tape.shape(weights)));
    }
    let x = tape.constant(batch.x.clone());
    let act = gin_stack(tape, x, weights, &batch.edges, phi)?;
    let groups: Rc<[Vec<usize>]> = batch.active_groups(tape.value(weights).data()).into();
    let h_z = tape.pool_mean(act, groups)?;
    let head = phi.head();
    let a = tape.matmul(h_z, head.w0)?;
    let a = tape.add_row(a, head.b0)?;
    let a = tape.relu(a)?;
    let a = tape.matmul(a, head.w1)?;
    let logits = tape.add_row(a, head.b1)?;
    Ok(PredictorOut { h_z, logits, act })
}

/// How the hard Top-r gate passes kept edges to the predictor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Kept edges carry their score.
    #[default]
    Soft,
    /// Kept edges carry weight 1; the gradient goes to the score.
    StraightThrough,
}

/// Everything one forward pass of the full model produces.
#[derive(Clone, Debug)]
pub struct ModelOut {
    pub pred: PredictorOut,
    /// Edge scores (`m x 1`) when an extractor is present.
    pub scores: Option<Var>,
    pub kept: Option<Rc<[bool]>>,
}

/// Extractor then predictor; without an extractor the predictor sees every
/// edge at weight 1.
pub fn model_forward(
    tape: &mut Tape,
    batch: &Batch,
    theta: Option<&Bound>,
    phi: &Bound,
    r: f64,
    gate: GateMode,
) -> Result<ModelOut> {
    match theta {
        None => {
            let ones = tape.constant(Matrix::ones(batch.num_edges(), 1));
            let pred = predictor_forward(tape, batch, ones, phi)?;
            Ok(ModelOut { pred, scores: None, kept: None })
        }
        Some(theta) => {
            let h = extractor_forward(tape, batch, theta)?;
            let scores = score_edges(tape, h, batch, theta)?;
            let kept = select_batch(tape.value(scores).data(), batch, r)?;
            let w = tape.edge_gate(scores, kept.clone(), gate == GateMode::StraightThrough)?;
            let pred = predictor_forward(tape, batch, w, phi)?;
            Ok(ModelOut { pred, scores: Some(scores), kept: Some(kept) })
        }
    }
}
