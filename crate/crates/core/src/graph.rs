//! Graph and dataset model, validation, domain splits, and JSONL storage.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::json;
use crate::tensor::Matrix;

pub const DATASET_SCHEMA: &str = "idg-dataset/1";

/// Undirected graph with dense node features. Edges are stored once as
/// `(u, v)` with `u < v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub id: String,
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub x: Matrix,
    pub y: usize,
    pub domain: String,
    /// 1 on ground-truth causal edges, aligned with `edges`.
    pub gt_edge_mask: Option<Vec<u8>>,
}

impl Graph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        connected(self.num_nodes, &self.edges)
    }
}

/// True when the edge list spans all `n` nodes in one component.
pub fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &w in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                stack.push(w);
            }
        }
    }
    count == n
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Every broken invariant of `g`; empty when the graph is valid.
pub fn validate_graph(g: &Graph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut bad = |s: String| out.push(Violation(s));
    if g.num_nodes == 0 {
        bad("num_nodes must be ≥ 1".into());
    }
    let mut seen = HashSet::with_capacity(g.edges.len());
    for (i, &(u, v)) in g.edges.iter().enumerate() {
        if u == v {
            bad(format!("edge {i}: self-loop ({u},{v})"));
            continue;
        }
        if u > v {
            bad(format!("edge {i}: ({u},{v}) not in canonical u<v order"));
        }
        if u.max(v) >= g.num_nodes {
            bad(format!("edge {i}: ({u},{v}) references a node ≥ num_nodes {}", g.num_nodes));
        }
        if !seen.insert((u.min(v), u.max(v))) {
            bad(format!("edge {i}: duplicate pair ({u},{v})"));
        }
    }
    if g.x.rows() != g.num_nodes {
        bad(format!("x has {} rows but num_nodes is {}", g.x.rows(), g.num_nodes));
    }
    if !g.x.is_finite() {
        bad("x contains non-finite values".into());
    }
    if let Some(mask) = &g.gt_edge_mask {
        if mask.len() != g.edges.len() {
            bad(format!("gt_edge_mask has {} entries for {} edges", mask.len(), g.edges.len()));
        }
        if let Some(i) = mask.iter().position(|&b| b > 1) {
            bad(format!("gt_edge_mask[{i}] is not 0/1"));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    /// Node feature dimension shared by every graph.
    pub d: usize,
    /// Number of classes; labels lie in `0..k`.
    pub k: usize,
    /// Free-form echo of whatever produced the data.
    pub meta: serde_json::Value,
}

impl Dataset {
    pub fn new(graphs: Vec<Graph>, meta: serde_json::Value) -> Result<Self> {
        let d = graphs.first().map_or(0, |g| g.feature_dim());
        let k = graphs.iter().map(|g| g.y + 1).max().unwrap_or(0);
        let ds = Dataset { graphs, d, k, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn domains(&self) -> BTreeSet<&str> {
        self.graphs.iter().map(|g| g.domain.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.graphs.iter().enumerate() {
            let v = validate_graph(g);
            if !v.is_empty() {
                let msgs: Vec<String> = v.iter().map(|v| v.0.clone()).collect();
                return Err(Error::Contract(format!("graph {i} ({}): {}", g.id, msgs.join("; "))));
            }
            if g.feature_dim() != self.d {
                return Err(Error::Contract(format!(
                    "graph {i} has feature dim {}, dataset has {}",
                    g.feature_dim(),
                    self.d
                )));
            }
            if g.y >= self.k {
                return Err(Error::Contract(format!("graph {i} label {} ≥ k = {}", g.y, self.k)));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    d: usize,
    k: usize,
    meta: serde_json::Value,
}

struct Rows<'a>(&'a Matrix);

impl Serialize for Rows<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.rows()))?;
        for i in 0..self.0.rows() {
            seq.serialize_element(self.0.row(i))?;
        }
        seq.end()
    }
}

#[derive(Serialize)]
struct GraphOut<'a> {
    id: &'a str,
    num_nodes: usize,
    edges: &'a [(usize, usize)],
    x: Rows<'a>,
    y: usize,
    domain: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    gt_edge_mask: Option<&'a [u8]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphIn {
    id: String,
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    x: Vec<Vec<f64>>,
    y: usize,
    domain: String,
    #[serde(default)]
    gt_edge_mask: Option<Vec<u8>>,
}

impl GraphIn {
    fn into_graph(self) -> Result<Graph> {
        let x = Matrix::from_rows(&self.x)?;
        // a graph with zero rows still needs its feature width; keep 0x0
        Ok(Graph {
            id: self.id,
            num_nodes: self.num_nodes,
            edges: self.edges,
            x,
            y: self.y,
            domain: self.domain,
            gt_edge_mask: self.gt_edge_mask,
        })
    }
}

/// Serializes one graph as a single JSON object.
pub fn graph_to_json(g: &Graph) -> Result<String> {
    let out = GraphOut {
        id: &g.id,
        num_nodes: g.num_nodes,
        edges: &g.edges,
        x: Rows(&g.x),
        y: g.y,
        domain: &g.domain,
        gt_edge_mask: g.gt_edge_mask.as_deref(),
    };
    Ok(json::to_string(&out)?)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header { schema: DATASET_SCHEMA.into(), d: ds.d, k: ds.k, meta: ds.meta.clone() };
    json::to_writer(&mut w, &header)?;
    for g in &ds.graphs {
        w.write_all(b"\n")?;
        w.write_all(graph_to_json(g)?.as_bytes())?;
    }
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?)
            .map_err(|e| Error::Parse { line: 1, msg: format!("header: {e}") })?,
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
    };
    if header.schema != DATASET_SCHEMA {
        return Err(Error::Schema { expected: DATASET_SCHEMA.into(), found: header.schema });
    }
    let mut graphs = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: GraphIn =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let mut g = rec.into_graph().map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if g.x.rows() == 0 {
            g.x = Matrix::zeros(0, header.d);
        }
        let v = validate_graph(&g);
        if !v.is_empty() {
            return Err(Error::Parse { line: lineno, msg: v[0].0.clone() });
        }
        graphs.push(g);
    }
    let ds = Dataset { graphs, d: header.d, k: header.k, meta: header.meta };
    ds.validate()?;
    Ok(ds)
}

/// Domain lists that decide which split a graph lands in.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRule {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Graphs whose domain appears in no list.
    #[serde(default)]
    pub dropped: usize,
}

impl Split {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(Error::Contract(format!("split index {i} ≥ dataset size {n}")));
            }
            if !seen.insert(i) {
                return Err(Error::Contract(format!("split index {i} appears twice")));
            }
        }
        Ok(())
    }
}

pub fn split_by_domain(ds: &Dataset, rule: &DomainRule) -> Result<Split> {
    let sets: [(&str, HashSet<&str>); 3] = [
        ("train", rule.train.iter().map(String::as_str).collect()),
        ("val", rule.val.iter().map(String::as_str).collect()),
        ("test", rule.test.iter().map(String::as_str).collect()),
    ];
    for a in 0..3 {
        for b in a + 1..3 {
            if let Some(d) = sets[a].1.intersection(&sets[b].1).next() {
                return Err(Error::Config(format!(
                    "domain {d:?} listed in both {} and {}",
                    sets[a].0, sets[b].0
                )));
            }
        }
    }
    let present = ds.domains();
    for (name, set) in &sets {
        if let Some(d) = set.iter().find(|d| !present.contains(*d)) {
            return Err(Error::Config(format!("{name} domain {d:?} does not occur in the dataset")));
        }
    }
    let mut split = Split::default();
    for (i, g) in ds.graphs.iter().enumerate() {
        let d = g.domain.as_str();
        if sets[0].1.contains(d) {
            split.train.push(i);
        } else if sets[1].1.contains(d) {
            split.val.push(i);
        } else if sets[2].1.contains(d) {
            split.test.push(i);
        } else {
            split.dropped += 1;
        }
    }
    Ok(split)
}
