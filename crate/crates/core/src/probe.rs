//! Diagnostics over a frozen model: ID vs OOD norms, the perturbation
//! probe, weight spectra, embedding divergence, and embedding export.

use std::io::Write;

use serde::Serialize;

use crate::engine::{evaluate, infer, pick, summarize, Checkpoint, Evaluation};
use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph};
use crate::rng::{hash64, substream};
use crate::synth::rewire_edges;
use crate::tensor::{singular_values, Matrix};

pub const PROBE_HEADER: &str = "ratio,mean_activation,mean_norm,accuracy";
pub const SPECTRA_HEADER: &str = "matrix,index,sigma";
pub const IDOOD_HEADER: &str = "mean_act_id,mean_norm_id,mean_act_ood,mean_norm_ood";
pub const DIVERGENCE_HEADER: &str = "embedding,divergence";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IdOodNorms {
    pub mean_act_id: f64,
    pub mean_norm_id: f64,
    pub mean_act_ood: f64,
    pub mean_norm_ood: f64,
}

pub fn id_ood_norms(ck: &Checkpoint, ds: &Dataset, id: &[usize], ood: &[usize]) -> Result<IdOodNorms> {
    let a = evaluate(ck, ds, id)?;
    let b = evaluate(ck, ds, ood)?;
    Ok(IdOodNorms {
        mean_act_id: a.mean_activation,
        mean_norm_id: a.mean_norm,
        mean_act_ood: b.mean_activation,
        mean_norm_ood: b.mean_norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub ratio: f64,
    pub mean_activation: f64,
    pub mean_norm: f64,
    pub accuracy: f64,
}

impl ProbeRow {
    fn from_eval(ratio: f64, e: &Evaluation) -> Self {
        ProbeRow { ratio, mean_activation: e.mean_activation, mean_norm: e.mean_norm, accuracy: e.accuracy }
    }
}

/// Rewires every graph at each ratio and evaluates the frozen model,
/// averaging over probe seeds. Ratio 0 is the unperturbed evaluation.
pub fn norm_probe(
    ck: &Checkpoint,
    ds: &Dataset,
    indices: &[usize],
    ratios: &[f64],
    seeds: &[u64],
) -> Result<Vec<ProbeRow>> {
    if ratios.is_empty() || seeds.is_empty() {
        return Err(Error::Config("probe needs at least one ratio and one seed".into()));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || ratios.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!("probe ratios must be ascending within [0, 1], got {ratios:?}")));
    }
    let graphs = pick(ds, indices)?;
    let labels: Vec<usize> = graphs.iter().map(|g| g.y).collect();
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        if ratio == 0.0 {
            rows.push(ProbeRow::from_eval(0.0, &evaluate(ck, ds, indices)?));
            continue;
        }
        let mut acc = ProbeRow { ratio, mean_activation: 0.0, mean_norm: 0.0, accuracy: 0.0 };
        for &seed in seeds {
            let perturbed = graphs
                .iter()
                .zip(indices)
                .map(|(g, &i)| {
                    let mut rng = substream(seed, "probe", hash64(&[ratio.to_bits(), i as u64]));
                    rewire_edges(g, ratio, &mut rng).map_err(|e| match e {
                        Error::Domain(msg) => Error::Domain(format!("at rewire ratio {ratio}: {msg}")),
                        other => other,
                    })
                })
                .collect::<Result<Vec<Graph>>>()?;
            let refs: Vec<&Graph> = perturbed.iter().collect();
            let e = summarize(&infer(ck, &refs, true)?, &labels)?;
            acc.mean_activation += e.mean_activation;
            acc.mean_norm += e.mean_norm;
            acc.accuracy += e.accuracy;
        }
        let n = seeds.len() as f64;
        acc.mean_activation /= n;
        acc.mean_norm /= n;
        acc.accuracy /= n;
        rows.push(acc);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub name: String,
    pub shape: (usize, usize),
    /// Descending.
    pub values: Vec<f64>,
    /// Entry `k` is the share of squared singular mass in the top `k + 1`.
    pub energy_fraction: Vec<f64>,
    /// Count of values at least 1% of the largest.
    pub effective_rank: usize,
}

pub fn spectrum(name: &str, w: &Matrix) -> Result<SpectrumReport> {
    let values = singular_values(w)?;
    let total: f64 = values.iter().map(|s| s * s).sum();
    let mut run = 0.0;
    let energy_fraction = values
        .iter()
        .map(|s| {
            run += s * s;
            if total == 0.0 {
                1.0
            } else {
                (run / total).min(1.0)
            }
        })
        .collect();
    let max = values.first().copied().unwrap_or(0.0);
    let effective_rank = if max > 0.0 { values.iter().filter(|&&s| s >= 0.01 * max).count() } else { 0 };
    Ok(SpectrumReport { name: name.to_string(), shape: w.shape(), values, energy_fraction, effective_rank })
}

/// One spectrum per affine weight matrix of every network.
pub fn svd_report(ck: &Checkpoint) -> Result<Vec<SpectrumReport>> {
    let mut out = Vec::new();
    for net in ck.networks() {
        for (name, t) in net.names().iter().zip(&net.tensors) {
            if name.ends_with(".weight") {
                out.push(spectrum(name, t)?);
            }
        }
    }
    Ok(out)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_pair_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += dist(x, y);
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Squared energy distance `2E|A-B| - E|A-A'| - E|B-B'|` over all pairs.
pub fn shift_divergence(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("divergence needs two nonempty sets".into()));
    }
    let d = a[0].len();
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != d) {
        return Err(Error::dim("shift_divergence", (1, d), (1, v.len())));
    }
    Ok(2.0 * mean_pair_dist(a, b) - mean_pair_dist(a, a) - mean_pair_dist(b, b))
}

/// The ground-truth edges of `g` on their own nodes, relabeled in order.
pub fn causal_subgraph(g: &Graph) -> Result<Graph> {
    let mask = g
        .gt_edge_mask
        .as_ref()
        .ok_or_else(|| Error::Domain(format!("graph {} has no ground-truth edge mask", g.id)))?;
    let mut keep = vec![false; g.num_nodes];
    for (&(u, v), &m) in g.edges.iter().zip(mask) {
        if m == 1 {
            keep[u] = true;
            keep[v] = true;
        }
    }
    let nodes: Vec<usize> = (0..g.num_nodes).filter(|&i| keep[i]).collect();
    if nodes.is_empty() {
        return Err(Error::Domain(format!("graph {} has no ground-truth edges", g.id)));
    }
    let mut relabel = vec![usize::MAX; g.num_nodes];
    for (new, &old) in nodes.iter().enumerate() {
        relabel[old] = new;
    }
    let edges = g
        .edges
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == 1)
        .map(|(&(u, v), _)| (relabel[u], relabel[v]))
        .collect();
    let rows: Vec<&[f64]> = nodes.iter().map(|&i| g.x.row(i)).collect();
    Ok(Graph {
        id: g.id.clone(),
        num_nodes: nodes.len(),
        edges,
        x: Matrix::from_rows(&rows)?,
        y: g.y,
        domain: g.domain.clone(),
        gt_edge_mask: Some(vec![1; mask.iter().filter(|&&m| m == 1).count()]),
    })
}

/// Pooled predictor representations of whole graphs (every edge at weight 1).
pub fn embed_full(ck: &Checkpoint, graphs: &[&Graph]) -> Result<Vec<Vec<f64>>> {
    Ok(infer(ck, graphs, false)?.into_iter().map(|o| o.h_z).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DivergenceReport {
    /// Train vs test divergence of ground-truth subgraph embeddings.
    pub causal: f64,
    /// Train vs test divergence of full-graph embeddings.
    pub full: f64,
}

/// Embeds ground-truth subgraphs and full graphs of both index sets
/// through the same frozen predictor and compares the two divergences.
pub fn divergence_check(ck: &Checkpoint, ds: &Dataset, train: &[usize], test: &[usize]) -> Result<DivergenceReport> {
    let a = pick(ds, train)?;
    let b = pick(ds, test)?;
    let sub = |gs: &[&Graph]| -> Result<Vec<Graph>> { gs.iter().map(|g| causal_subgraph(g)).collect() };
    let (sa, sb) = (sub(&a)?, sub(&b)?);
    let ra: Vec<&Graph> = sa.iter().collect();
    let rb: Vec<&Graph> = sb.iter().collect();
    Ok(DivergenceReport {
        causal: shift_divergence(&embed_full(ck, &ra)?, &embed_full(ck, &rb)?)?,
        full: shift_divergence(&embed_full(ck, &a)?, &embed_full(ck, &b)?)?,
    })
}

/// Quotes a CSV field when it holds a separator, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn embeddings_header(d_h: usize) -> String {
    let mut h = String::from("graph_id,label,domain");
    for j in 0..d_h {
        h.push_str(&format!(",z{j}"));
    }
    h
}

/// Writes `graph_id,label,domain,z0..` rows of `H_Z` for `indices`.
pub fn export_embeddings<W: Write>(ck: &Checkpoint, ds: &Dataset, indices: &[usize], mut w: W) -> Result<()> {
    let graphs = pick(ds, indices)?;
    let outputs = infer(ck, &graphs, true)?;
    writeln!(w, "{}", embeddings_header(ck.predictor.d_h))?;
    for (g, o) in graphs.iter().zip(&outputs) {
        write!(w, "{},{},{}", csv_field(&g.id), g.y, csv_field(&g.domain))?;
        for v in &o.h_z {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_probe_csv<W: Write>(mut w: W, rows: &[ProbeRow]) -> Result<()> {
    writeln!(w, "{PROBE_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.ratio, r.mean_activation, r.mean_norm, r.accuracy)?;
    }
    Ok(())
}

pub fn write_spectra_csv<W: Write>(mut w: W, reports: &[SpectrumReport]) -> Result<()> {
    writeln!(w, "{SPECTRA_HEADER}")?;
    for r in reports {
        for (i, s) in r.values.iter().enumerate() {
            writeln!(w, "{},{i},{s}", csv_field(&r.name))?;
        }
    }
    Ok(())
}

pub fn write_idood_csv<W: Write>(mut w: W, n: &IdOodNorms) -> Result<()> {
    writeln!(w, "{IDOOD_HEADER}")?;
    writeln!(w, "{},{},{},{}", n.mean_act_id, n.mean_norm_id, n.mean_act_ood, n.mean_norm_ood)?;
    Ok(())
}

pub fn write_divergence_csv<W: Write>(mut w: W, d: &DivergenceReport) -> Result<()> {
    writeln!(w, "{DIVERGENCE_HEADER}")?;
    writeln!(w, "causal,{}", d.causal)?;
    writeln!(w, "full,{}", d.full)?;
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Domain("spearman needs two equal-length series of length ≥ 2".into()));
    }
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_distance_closed_forms() {
        let a = vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![-1.0, 0.5]];
        assert_eq!(shift_divergence(&a, &a).unwrap(), 0.0);
        let d = shift_divergence(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap();
        assert!((d - 10.0).abs() < 1e-12);
        assert!(shift_divergence(&[], &a).is_err());
        assert!(shift_divergence(&a, &[vec![1.0]]).is_err());
    }

    #[test]
    fn energy_distance_brute_force() {
        let a = vec![vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 1.0]];
        let b = vec![vec![5.0, 1.0], vec![4.0, -1.0], vec![6.0, 2.0]];
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                ab += dist(&a[i], &b[j]);
                aa += dist(&a[i], &a[j]);
                bb += dist(&b[i], &b[j]);
            }
        }
        let want = (2.0 * ab - aa - bb) / 9.0;
        let got = shift_divergence(&a, &b).unwrap();
        assert!((got - want).abs() <= 1e-12);
        assert!((got - shift_divergence(&b, &a).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn spectrum_of_known_matrices() {
        let r = spectrum("id", &Matrix::identity(4)).unwrap();
        assert!(r.values.iter().all(|&s| (s - 1.0).abs() < 1e-12));
        assert_eq!(r.effective_rank, 4);
        let w = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let r = spectrum("toy", &w).unwrap();
        let s2 = 2.0f64.sqrt();
        assert!((r.values[0] - s2).abs() < 1e-9 && (r.values[1] - s2).abs() < 1e-9);
        assert!(r.values[2].abs() < 1e-9);
        assert_eq!(r.effective_rank, 2);
        assert!((r.energy_fraction[1] - 1.0).abs() < 1e-12);
        assert!(r.energy_fraction.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[0.0, 1.0, 2.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[0.0, 1.0, 2.0, 3.0], &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs() < 1e-12);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 2.0]).unwrap();
        assert!((r - 0.894_427_190_999_915_9).abs() < 1e-12);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("size:10-20"), "size:10-20");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("q\"x"), "\"q\"\"x\"");
    }
}
