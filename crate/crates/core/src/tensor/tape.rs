//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes. Each op pushes its output
//! value together with the rule needed to route gradients back to its
//! parents; parents always have smaller indices than children, so walking
//! the arena backwards is a valid reverse topological order. A tape is
//! built for one forward pass and dropped afterwards.

use std::rc::Rc;

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which dimension a reduction collapses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows: `r x c -> 1 x c`.
    Rows,
    /// Collapse columns: `r x c -> r x 1`.
    Cols,
    /// Collapse everything: `r x c -> 1 x 1`.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    L2Norm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Hadamard,
    Relu,
    Sigmoid,
    Log,
    Scale(f64),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    ScaleShift(Var, f64),
    Reduce(Var, ReduceKind, Axis),
    Clamp(Var, f64, f64),
    SoftmaxCe { logits: Var, labels: Rc<[usize]>, probs: Matrix },
    GatherRows(Var, Rc<[usize]>),
    SliceRows(Var, usize),
    ConcatCols(Var, Var),
    MessagePass { h: Var, w: Var, edges: Rc<[(usize, usize)]> },
    Pool { h: Var, groups: Rc<[Vec<usize>]> },
    EdgeGate { scores: Var, kept: Rc<[bool]> },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant by `backward`.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`; zeros when `v` did not
    /// influence the loss.
    pub fn grad(&self, v: Var) -> Matrix {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => {
                let (r, c) = self.shape(v);
                Matrix::zeros(r, c)
            }
        }
    }

    fn push_unchecked(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("hadamard", out, Op::Hadamard(a, b), &[a, b])
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb != (1, sa.1) {
            return Err(Error::dim("add_row", sa, sb));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..sa.0 {
            for (x, y) in out.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    /// Multiplies `a` by the value of the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::dim("mul_scalar", self.shape(a), self.shape(s)));
        }
        let k = self.value(s).item();
        let out = self.value(a).map(|x| x * k);
        self.push("mul_scalar", out, Op::MulScalar(a, s), &[a, s])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(stable_sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.scale_shift(a, k, 0.0)
    }

    /// `k * a + shift`, elementwise.
    pub fn scale_shift(&mut self, a: Var, k: f64, shift: f64) -> Result<Var> {
        let out = self.value(a).map(|x| k * x + shift);
        self.push("scale", out, Op::ScaleShift(a, k), &[a])
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| Error::Contract(format!("{kind:?} needs a second operand")))
        };
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Hadamard => self.hadamard(a, need_b()?),
            Elementwise::Relu => self.relu(a),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Log => self.log(a),
            Elementwise::Scale(k) => self.scale(a, k),
        }
    }

    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: Axis) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Domain("reduction of an empty matrix".into()));
        }
        let (r, c) = x.shape();
        let out = match axis {
            Axis::All => {
                let v = match kind {
                    ReduceKind::Sum => x.data().iter().sum(),
                    ReduceKind::Mean => x.data().iter().sum::<f64>() / x.len() as f64,
                    ReduceKind::L2Norm => x.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
                };
                Matrix::scalar(v)
            }
            Axis::Rows => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, v) in acc.iter_mut().zip(x.row(i)) {
                        *s += if kind == ReduceKind::L2Norm { v * v } else { *v };
                    }
                }
                finish_reduce(kind, &mut acc, r);
                Matrix::row_vector(acc)
            }
            Axis::Cols => {
                let mut acc: Vec<f64> = (0..r)
                    .map(|i| match kind {
                        ReduceKind::L2Norm => x.row(i).iter().map(|v| v * v).sum(),
                        _ => x.row(i).iter().sum(),
                    })
                    .collect();
                finish_reduce(kind, &mut acc, c);
                Matrix::column(acc)
            }
        };
        self.push("reduce", out, Op::Reduce(a, kind, axis), &[a])
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    pub fn l2_norm(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.reduce(ReduceKind::L2Norm, a, axis)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.clamp(a, lo, f64::INFINITY)
    }

    /// Batch-mean cross entropy of row-wise softmax against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (b, k) = z.shape();
        if b == 0 {
            return Err(Error::Domain("cross entropy over an empty batch".into()));
        }
        if labels.len() != b {
            return Err(Error::dim("softmax_cross_entropy", (b, k), (labels.len(), 1)));
        }
        let mut probs = Matrix::zeros(b, k);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Domain(format!("label {y} out of range for {k} classes")));
            }
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[y];
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - max).exp() / sum;
            }
        }
        let out = Matrix::scalar(total / b as f64);
        let labels: Rc<[usize]> = labels.into();
        self.push("softmax_cross_entropy", out, Op::SoftmaxCe { logits, labels, probs }, &[logits])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = Matrix::zeros(idx.len(), c);
        for (r, &i) in idx.iter().enumerate() {
            if i >= x.rows() {
                return Err(Error::Contract(format!("gather index {i} >= {} rows", x.rows())));
            }
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push("gather_rows", out, Op::GatherRows(a, idx), &[a])
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(Error::Contract(format!(
                "row slice {start}..{end} out of bounds for {} rows",
                x.rows()
            )));
        }
        let c = x.cols();
        let out = Matrix::new(end - start, c, x.data()[start * c..end * c].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::dim("concat_cols", sa, sb));
        }
        let mut out = Matrix::zeros(sa.0, sa.1 + sb.1);
        for i in 0..sa.0 {
            let row = out.row_mut(i);
            row[..sa.1].copy_from_slice(self.nodes[a.0].value.row(i));
            row[sa.1..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Weighted neighbour sum over undirected edges: every edge `(u, v)`
    /// with weight `w[e]` adds `w[e] * h[u]` to row `v` and `w[e] * h[v]`
    /// to row `u`. `w` is `m x 1`.
    pub fn message_pass(&mut self, h: Var, w: Var, edges: Rc<[(usize, usize)]>) -> Result<Var> {
        let (n, d) = self.shape(h);
        if self.shape(w) != (edges.len(), 1) {
            return Err(Error::dim("message_pass", (edges.len(), 1), self.shape(w)));
        }
        let hv = &self.nodes[h.0].value;
        let wv = self.nodes[w.0].value.data();
        let mut out = Matrix::zeros(n, d);
        for (e, &(u, v)) in edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(Error::Contract(format!("edge ({u},{v}) outside {n} nodes")));
            }
            let we = wv[e];
            if we == 0.0 {
                continue;
            }
            for j in 0..d {
                let (hu, hvj) = (hv.get(u, j), hv.get(v, j));
                out.data_mut()[v * d + j] += we * hu;
                out.data_mut()[u * d + j] += we * hvj;
            }
        }
        self.push("message_pass", out, Op::MessagePass { h, w, edges }, &[h, w])
    }

    /// Row `g` of the output is the mean of the rows of `h` listed in
    /// `groups[g]`; an empty group yields a zero row.
    pub fn pool_mean(&mut self, h: Var, groups: Rc<[Vec<usize>]>) -> Result<Var> {
        let x = self.value(h);
        let d = x.cols();
        let mut out = Matrix::zeros(groups.len(), d);
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let inv = 1.0 / members.len() as f64;
            let row = out.row_mut(g);
            for &i in members {
                if i >= x.rows() {
                    return Err(Error::Contract(format!("pool index {i} >= {} rows", x.rows())));
                }
                for (o, v) in row.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            for o in row.iter_mut() {
                *o *= inv;
            }
        }
        self.push("pool_mean", out, Op::Pool { h, groups }, &[h])
    }

    /// Hard selection gate over an `m x 1` score column. Kept entries carry
    /// the score (`straight_through = false`) or the constant 1
    /// (`straight_through = true`); dropped entries are 0. In both cases
    /// the gradient of a kept entry is passed to its score unchanged and
    /// dropped entries receive none.
    pub fn edge_gate(&mut self, scores: Var, kept: Rc<[bool]>, straight_through: bool) -> Result<Var> {
        let s = self.value(scores);
        if s.shape() != (kept.len(), 1) {
            return Err(Error::dim("edge_gate", s.shape(), (kept.len(), 1)));
        }
        let out = Matrix::column(
            s.data()
                .iter()
                .zip(kept.iter())
                .map(|(&v, &k)| match (k, straight_through) {
                    (false, _) => 0.0,
                    (true, true) => 1.0,
                    (true, false) => v,
                })
                .collect(),
        );
        self.push("edge_gate", out, Op::EdgeGate { scores, kept }, &[scores])
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates gradients of the scalar `loss` into every node that
    /// requires them. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Matrix) {
        // Each arm computes parent contributions from immutable borrows,
        // then accumulates.
        let contribs: Vec<(Var, Matrix)> = match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let mut out = Vec::with_capacity(2);
                if self.wants(a) {
                    let bv = self.value(b);
                    let mut da = Matrix::zeros(g.rows(), bv.rows());
                    gemm(g, false, bv, true, &mut da, 0.0);
                    out.push((a, da));
                }
                if self.wants(b) {
                    let av = self.value(a);
                    let mut db = Matrix::zeros(av.cols(), g.cols());
                    gemm(av, true, g, false, &mut db, 0.0);
                    out.push((b, db));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Hadamard(a, b) => vec![
                (*a, zip_map(g, self.value(*b), |x, y| x * y)),
                (*b, zip_map(g, self.value(*a), |x, y| x * y)),
            ],
            Op::AddRow(a, bias) => {
                let mut db = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (s, v) in db.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                vec![(*a, g.clone()), (*bias, Matrix::row_vector(db))]
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                let ds: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                vec![(*a, g.map(|x| x * k)), (*s, Matrix::scalar(ds))]
            }
            Op::Relu(a) => {
                vec![(*a, zip_map(g, self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 }))]
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                vec![(*a, zip_map(g, y, |gx, y| gx * y * (1.0 - y)))]
            }
            Op::Log(a) => vec![(*a, zip_map(g, self.value(*a), |gx, x| gx / x))],
            Op::ScaleShift(a, k) => {
                let k = *k;
                vec![(*a, g.map(|x| x * k))]
            }
            Op::Reduce(a, kind, axis) => {
                let x = self.value(*a);
                let y = &self.nodes[i].value;
                let (r, c) = x.shape();
                let mut da = Matrix::zeros(r, c);
                for ii in 0..r {
                    for jj in 0..c {
                        let (gi, count) = match axis {
                            Axis::All => ((0, 0), r * c),
                            Axis::Rows => ((0, jj), r),
                            Axis::Cols => ((ii, 0), c),
                        };
                        let gv = g.get(gi.0, gi.1);
                        let v = match kind {
                            ReduceKind::Sum => gv,
                            ReduceKind::Mean => gv / count as f64,
                            ReduceKind::L2Norm => {
                                let n = y.get(gi.0, gi.1);
                                if n > 0.0 {
                                    gv * x.get(ii, jj) / n
                                } else {
                                    0.0
                                }
                            }
                        };
                        da.set(ii, jj, v);
                    }
                }
                vec![(*a, da)]
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *a,
                    zip_map(g, self.value(*a), |gx, x| if x > lo && x < hi { gx } else { 0.0 }),
                )]
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let b = probs.rows() as f64;
                let scale = g.item() / b;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![(*logits, d)]
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut da = Matrix::zeros(r, c);
                for (row, &src) in idx.iter().enumerate() {
                    for (o, v) in da.row_mut(src).iter_mut().zip(g.row(row)) {
                        *o += v;
                    }
                }
                vec![(*a, da)]
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut da = Matrix::zeros(r, c);
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*a, da)]
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                let mut da = Matrix::zeros(g.rows(), ca);
                let mut db = Matrix::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::MessagePass { h, w, edges } => {
                let hv = self.value(*h);
                let wv = self.value(*w).data();
                let (n, d) = hv.shape();
                let mut out = Vec::with_capacity(2);
                if self.wants(*h) {
                    let mut dh = Matrix::zeros(n, d);
                    for (e, &(u, v)) in edges.iter().enumerate() {
                        let we = wv[e];
                        if we == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            dh.data_mut()[u * d + j] += we * g.get(v, j);
                            dh.data_mut()[v * d + j] += we * g.get(u, j);
                        }
                    }
                    out.push((*h, dh));
                }
                if self.wants(*w) {
                    let dw = edges
                        .iter()
                        .map(|&(u, v)| {
                            let a: f64 = g.row(v).iter().zip(hv.row(u)).map(|(x, y)| x * y).sum();
                            let b: f64 = g.row(u).iter().zip(hv.row(v)).map(|(x, y)| x * y).sum();
                            a + b
                        })
                        .collect();
                    out.push((*w, Matrix::column(dw)));
                }
                out
            }
            Op::Pool { h, groups } => {
                let (r, c) = self.shape(*h);
                let mut dh = Matrix::zeros(r, c);
                for (gi, members) in groups.iter().enumerate() {
                    if members.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / members.len() as f64;
                    for &m in members {
                        for (o, v) in dh.row_mut(m).iter_mut().zip(g.row(gi)) {
                            *o += v * inv;
                        }
                    }
                }
                vec![(*h, dh)]
            }
            Op::EdgeGate { scores, kept } => {
                let ds = Matrix::column(
                    g.data().iter().zip(kept.iter()).map(|(&x, &k)| if k { x } else { 0.0 }).collect(),
                );
                vec![(*scores, ds)]
            }
        };
        for (v, c) in contribs {
            self.accumulate(v, c);
        }
    }
}

fn finish_reduce(kind: ReduceKind, acc: &mut [f64], count: usize) {
    match kind {
        ReduceKind::Sum => {}
        ReduceKind::Mean => acc.iter_mut().for_each(|v| *v /= count as f64),
        ReduceKind::L2Norm => acc.iter_mut().for_each(|v| *v = v.sqrt()),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("shapes checked by caller")
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Matrix {
        Matrix::row_vector(v.to_vec())
    }

    #[test]
    fn relu_sign_cases() {
        let mut t = Tape::new();
        let a = t.constant(row(&[-1.0, 0.0, 2.0]));
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_is_zero_at_zero() {
        let mut t = Tape::new();
        let a = t.param(row(&[-1.0, 0.0, 2.0]));
        let r = t.relu(a).unwrap();
        let s = t.sum(r, Axis::All).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_and_log_identities() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::scalar(0.0));
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).item(), 0.5);
        let e = t.constant(Matrix::scalar(std::f64::consts::E));
        let l = t.log(e).unwrap();
        assert!((t.value(l).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(stable_sigmoid(-1000.0), 0.0);
        assert_eq!(stable_sigmoid(1000.0), 1.0);
        assert!(stable_sigmoid(-30.0) > 0.0);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut t = Tape::new();
        let a = t.constant(row(&[1.0, 0.0]));
        assert!(matches!(t.log(a), Err(Error::Domain(_))));
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 2));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(matches!(t.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(t.elementwise(Elementwise::Hadamard, a, Some(b)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_rows(&[[1.0, 3.0], [5.0, 7.0]]).unwrap());
        let m = t.mean(a, Axis::Rows).unwrap();
        assert_eq!(t.value(m).data(), &[3.0, 5.0]);
        let v = t.constant(Matrix::column(vec![1.0, 0.0, 1.0, 0.0]));
        let n = t.l2_norm(v, Axis::All).unwrap();
        assert!((t.value(n).item() - 2f64.sqrt()).abs() < 1e-15);
        let z = t.constant(Matrix::zeros(4, 1));
        let n0 = t.l2_norm(z, Axis::All).unwrap();
        assert_eq!(t.value(n0).item(), 0.0);
        let empty = t.constant(Matrix::zeros(0, 3));
        assert!(matches!(t.sum(empty, Axis::All), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut t = Tape::new();
        let u = t.constant(Matrix::zeros(2, 3));
        let l = t.softmax_cross_entropy(u, &[0, 2]).unwrap();
        assert!((t.value(l).item() - 3f64.ln()).abs() < 1e-15);

        let sat = t.constant(Matrix::from_rows(&[[1000.0, 0.0, 0.0]]).unwrap());
        let l = t.softmax_cross_entropy(sat, &[0]).unwrap();
        assert!(t.value(l).item().abs() < 1e-12);

        // -log softmax([1, 2])[c]: ln(1 + e) for c = 0, ln(1 + e) - 1 for c = 1
        let z = t.constant(Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
        let l0 = t.softmax_cross_entropy(z, &[0]).unwrap();
        let l1 = t.softmax_cross_entropy(z, &[1]).unwrap();
        let e = 1f64.exp();
        assert!((t.value(l0).item() - (1.0 + e).ln()).abs() < 1e-14);
        assert!((t.value(l1).item() - ((1.0 + e).ln() - 1.0)).abs() < 1e-14);
        assert!((t.value(l1).item() - 0.3133).abs() < 1e-4);

        assert!(matches!(t.softmax_cross_entropy(z, &[2]), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut t = Tape::new();
        let z = t.param(Matrix::from_rows(&[[1.0, 2.0], [0.0, 0.0]]).unwrap());
        let l = t.softmax_cross_entropy(z, &[0, 1]).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(z);
        let p = 1.0 / (1.0 + 1f64.exp());
        assert!((g.get(0, 0) - (p - 1.0) / 2.0).abs() < 1e-15);
        assert!((g.get(1, 1) - (0.5 - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 1));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_linear_map_gradient_broadcasts_input() {
        // d/dW sum(W x) = 1 * x^T for every row.
        let mut t = Tape::new();
        let w = t.param(Matrix::new(3, 2, vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.5]).unwrap());
        let x = t.constant(Matrix::column(vec![4.0, -2.0]));
        let y = t.matmul(w, x).unwrap();
        let s = t.sum(y, Axis::All).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(w);
        for i in 0..3 {
            assert_eq!(g.row(i), &[4.0, -2.0]);
        }
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let p = t.param(Matrix::ones(2, 2));
        let q = t.param(Matrix::ones(1, 1));
        let s = t.sum(q, Axis::All).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(p), Matrix::zeros(2, 2));
        assert_eq!(t.grad(s).item(), 1.0);
    }

    #[test]
    fn edge_gate_forward_modes() {
        let mut t = Tape::new();
        let s = t.param(Matrix::column(vec![0.9, 0.2, 0.7]));
        let kept: Rc<[bool]> = vec![true, false, true].into();
        let soft = t.edge_gate(s, kept.clone(), false).unwrap();
        let hard = t.edge_gate(s, kept, true).unwrap();
        assert_eq!(t.value(soft).data(), &[0.9, 0.0, 0.7]);
        assert_eq!(t.value(hard).data(), &[1.0, 0.0, 1.0]);
        let total = t.add(soft, hard).unwrap();
        let l = t.sum(total, Axis::All).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(s).data(), &[2.0, 0.0, 2.0]);
    }
}
