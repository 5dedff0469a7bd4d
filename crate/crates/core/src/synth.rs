//! Motif-style synthetic graphs: a base graph (the environment) with one
//! label-determining motif attached by a single edge.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph, Split};
use crate::rng::{from_seed, hash64, Rng};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotifKind {
    House,
    Cycle5,
    Crane,
}

impl MotifKind {
    pub const ALL: [MotifKind; 3] = [MotifKind::House, MotifKind::Cycle5, MotifKind::Crane];

    pub fn canonical_label(self) -> usize {
        match self {
            MotifKind::House => 0,
            MotifKind::Cycle5 => 1,
            MotifKind::Crane => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotifKind::House => "house",
            MotifKind::Cycle5 => "cycle5",
            MotifKind::Crane => "crane",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Tree,
    Ladder,
    Star,
    Path,
    Wheel,
}

impl BaseKind {
    pub const ALL: [BaseKind; 5] = [BaseKind::Tree, BaseKind::Ladder, BaseKind::Star, BaseKind::Path, BaseKind::Wheel];

    pub fn name(self) -> &'static str {
        match self {
            BaseKind::Tree => "tree",
            BaseKind::Ladder => "ladder",
            BaseKind::Star => "star",
            BaseKind::Path => "path",
            BaseKind::Wheel => "wheel",
        }
    }

    pub fn min_size(self) -> usize {
        match self {
            BaseKind::Wheel => 5,
            _ => 4,
        }
    }
}

macro_rules! name_parsing {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|k| k.name() == s)
                    .ok_or_else(|| Error::Config(format!("unknown {} kind {s:?}", $what)))
            }
        }
    };
}
name_parsing!(MotifKind, "motif");
name_parsing!(BaseKind, "base");

/// Connected piece of a graph without features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fragment {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Fragment {
    fn new(nodes: usize, mut edges: Vec<(usize, usize)>) -> Self {
        for e in &mut edges {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        Fragment { nodes, edges }
    }
}

/// Motif fragment and its canonical label (house 0, cycle5 1, crane 2).
pub fn make_motif(kind: MotifKind) -> (Fragment, usize) {
    let edges = match kind {
        MotifKind::House => vec![(1, 2), (2, 4), (3, 4), (1, 3), (0, 1), (0, 2)],
        MotifKind::Cycle5 => vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)],
        MotifKind::Crane => vec![(0, 1), (1, 2), (1, 3), (3, 4), (2, 4)],
    };
    (Fragment::new(5, edges), kind.canonical_label())
}

pub fn make_base(kind: BaseKind, size: usize, rng: &mut Rng) -> Result<Fragment> {
    if size < kind.min_size() {
        return Err(Error::Domain(format!(
            "{kind} base needs at least {} nodes, got {size}",
            kind.min_size()
        )));
    }
    let edges = match kind {
        BaseKind::Path => (0..size - 1).map(|i| (i, i + 1)).collect(),
        BaseKind::Star => (1..size).map(|i| (0, i)).collect(),
        BaseKind::Wheel => {
            let mut e: Vec<_> = (1..size).map(|i| (0, i)).collect();
            e.extend((1..size - 1).map(|i| (i, i + 1)));
            e.push((1, size - 1));
            e
        }
        BaseKind::Ladder => {
            let k = size / 2;
            let mut e = Vec::with_capacity(3 * k);
            for i in 0..k {
                e.push((i, k + i));
                if i + 1 < k {
                    e.push((i, i + 1));
                    e.push((k + i, k + i + 1));
                }
            }
            if size % 2 == 1 {
                e.push((k - 1, 2 * k));
            }
            e
        }
        BaseKind::Tree => prufer_tree(size, rng),
    };
    Ok(Fragment::new(size, edges))
}

/// Uniformly random labeled tree on `n ≥ 2` nodes.
fn prufer_tree(n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let seq: Vec<usize> = (0..n - 2).map(|_| rng.gen_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &s in &seq {
        degree[s] += 1;
    }
    let mut leaves: BTreeSet<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &s in &seq {
        let leaf = *leaves.iter().next().expect("a tree always has a leaf");
        leaves.remove(&leaf);
        edges.push((leaf, s));
        degree[s] -= 1;
        if degree[s] == 1 {
            leaves.insert(s);
        }
    }
    let mut rest = leaves.into_iter();
    let (a, b) = (rest.next().unwrap(), rest.next().unwrap());
    edges.push((a, b));
    edges
}

/// Disjoint union (base nodes first) joined by one random edge. Only the
/// motif's own edges are marked causal.
pub fn assemble(base: &Fragment, motif: &Fragment, y: usize, domain: &str, feature_dim: usize, rng: &mut Rng) -> Graph {
    let off = base.nodes;
    let n = base.nodes + motif.nodes;
    let mut tagged: Vec<((usize, usize), u8)> = base.edges.iter().map(|&e| (e, 0)).collect();
    tagged.extend(motif.edges.iter().map(|&(u, v)| ((u + off, v + off), 1)));
    let a = rng.gen_range(0..base.nodes);
    let b = rng.gen_range(0..motif.nodes) + off;
    tagged.push(((a, b), 0));
    tagged.sort_unstable();
    let (edges, mask) = tagged.into_iter().unzip();
    Graph {
        id: String::new(),
        num_nodes: n,
        edges,
        x: Matrix::ones(n, feature_dim),
        y,
        domain: domain.to_string(),
        gt_edge_mask: Some(mask),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shift {
    Basis,
    Size,
}

impl FromStr for Shift {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basis" => Ok(Shift::Basis),
            "size" => Ok(Shift::Size),
            _ => Err(Error::Config(format!("unknown shift {s:?} (basis|size)"))),
        }
    }
}

/// Per-split generation settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitGen {
    pub n: usize,
    pub bases: Vec<BaseKind>,
    /// Inclusive base-graph node-count range.
    pub sizes: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub shift: Shift,
    pub motif_classes: Vec<MotifKind>,
    pub train: SplitGen,
    pub val: SplitGen,
    pub test: SplitGen,
    pub feature_dim: usize,
    pub master_seed: u64,
}

impl GenConfig {
    /// Base kind shifts: train on wheel/tree/ladder, validate on star,
    /// test on path; base sizes 10-20 throughout.
    pub fn basis(master_seed: u64) -> Self {
        let s = |n, bases: &[BaseKind]| SplitGen { n, bases: bases.to_vec(), sizes: (10, 20) };
        GenConfig {
            shift: Shift::Basis,
            motif_classes: MotifKind::ALL.to_vec(),
            train: s(3000, &[BaseKind::Wheel, BaseKind::Tree, BaseKind::Ladder]),
            val: s(600, &[BaseKind::Star]),
            test: s(600, &[BaseKind::Path]),
            feature_dim: 1,
            master_seed,
        }
    }

    /// Base size shifts: every base kind, sizes 10-20 / 21-29 / 30-40.
    pub fn size(master_seed: u64) -> Self {
        let s = |n, sizes| SplitGen { n, bases: BaseKind::ALL.to_vec(), sizes };
        GenConfig {
            shift: Shift::Size,
            motif_classes: MotifKind::ALL.to_vec(),
            train: s(3000, (10, 20)),
            val: s(600, (21, 29)),
            test: s(600, (30, 40)),
            feature_dim: 1,
            master_seed,
        }
    }

    pub fn for_shift(shift: Shift, master_seed: u64) -> Self {
        match shift {
            Shift::Basis => Self::basis(master_seed),
            Shift::Size => Self::size(master_seed),
        }
    }

    fn splits(&self) -> [(&'static str, &SplitGen); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    pub fn validate(&self) -> Result<()> {
        let classes: HashSet<_> = self.motif_classes.iter().collect();
        if self.motif_classes.len() < 2 || classes.len() != self.motif_classes.len() {
            return Err(Error::Config("need at least two distinct motif classes".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be ≥ 1".into()));
        }
        for (name, s) in self.splits() {
            if s.n > 0 && s.bases.is_empty() {
                return Err(Error::Config(format!("{name} split has no base kinds")));
            }
            if s.sizes.0 > s.sizes.1 {
                return Err(Error::Config(format!("{name} size range {:?} is empty", s.sizes)));
            }
            if let Some(b) = s.bases.iter().find(|b| s.sizes.0 < b.min_size()) {
                return Err(Error::Config(format!(
                    "{name} sizes start at {} but {b} needs {}",
                    s.sizes.0,
                    b.min_size()
                )));
            }
        }
        let sp = self.splits();
        for a in 0..3 {
            for b in a + 1..3 {
                let ((na, sa), (nb, sb)) = (sp[a], sp[b]);
                if sa.n == 0 || sb.n == 0 {
                    continue;
                }
                match self.shift {
                    Shift::Basis => {
                        if let Some(k) = sa.bases.iter().find(|k| sb.bases.contains(k)) {
                            return Err(Error::Config(format!("base {k} used by both {na} and {nb}")));
                        }
                    }
                    Shift::Size => {
                        if sa.sizes.0 <= sb.sizes.1 && sb.sizes.0 <= sa.sizes.1 {
                            return Err(Error::Config(format!(
                                "size ranges of {na} {:?} and {nb} {:?} overlap",
                                sa.sizes, sb.sizes
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn size_bucket(sizes: (usize, usize)) -> String {
    format!("size:{}-{}", sizes.0, sizes.1)
}

/// Generates train, val, and test graphs in that order. Graph `i` of split
/// `s` is a pure function of `(master_seed, s, i)`; labels cycle through the
/// motif classes so each split is stratified.
pub fn generate_dataset(cfg: &GenConfig) -> Result<(Dataset, Split)> {
    cfg.validate()?;
    let k = cfg.motif_classes.len();
    let mut graphs = Vec::with_capacity(cfg.train.n + cfg.val.n + cfg.test.n);
    let mut split = Split::default();
    for (split_id, (name, s)) in cfg.splits().into_iter().enumerate() {
        for i in 0..s.n {
            let mut rng = from_seed(hash64(&[cfg.master_seed, split_id as u64, i as u64]));
            let label = i % k;
            let (motif, _) = make_motif(cfg.motif_classes[label]);
            let kind = s.bases[rng.gen_range(0..s.bases.len())];
            let size = rng.gen_range(s.sizes.0..=s.sizes.1);
            let base = make_base(kind, size, &mut rng)?;
            let domain = match cfg.shift {
                Shift::Basis => kind.name().to_string(),
                Shift::Size => size_bucket(s.sizes),
            };
            let mut g = assemble(&base, &motif, label, &domain, cfg.feature_dim, &mut rng);
            g.id = format!("{name}-{i:05}");
            let idx = graphs.len();
            match split_id {
                0 => split.train.push(idx),
                1 => split.val.push(idx),
                _ => split.test.push(idx),
            }
            graphs.push(g);
        }
    }
    let meta = serde_json::json!({ "generator": cfg });
    Ok((Dataset { graphs, d: cfg.feature_dim, k, meta }, split))
}

/// Replaces `floor(ratio * m)` uniformly chosen edges with the same number
/// of uniformly chosen node pairs that were not edges before. Node and edge
/// counts are preserved; the ground-truth mask is dropped.
pub fn rewire_edges(g: &Graph, ratio: f64, rng: &mut Rng) -> Result<Graph> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("rewire ratio {ratio} outside [0, 1]")));
    }
    let m = g.edges.len();
    let k = (ratio * m as f64).floor() as usize;
    if k == 0 {
        return Ok(g.clone());
    }
    let n = g.num_nodes;
    let free = n * (n - 1) / 2 - m;
    if free < k {
        return Err(Error::Domain(format!(
            "cannot insert {k} new edges into graph {} ({n} nodes, {m} edges, {free} free pairs)",
            g.id
        )));
    }
    let original: HashSet<(usize, usize)> = g.edges.iter().copied().collect();
    let removed: HashSet<usize> = sample(rng, m, k).into_iter().collect();
    let mut edges: Vec<(usize, usize)> =
        g.edges.iter().enumerate().filter(|(i, _)| !removed.contains(i)).map(|(_, &e)| e).collect();
    let mut added = HashSet::with_capacity(k);
    while added.len() < k {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u == v {
            continue;
        }
        let e = (u.min(v), u.max(v));
        if original.contains(&e) || !added.insert(e) {
            continue;
        }
        edges.push(e);
    }
    edges.sort_unstable();
    Ok(Graph { edges, gt_edge_mask: None, ..g.clone() })
}

/// `m` distinct uniformly random node pairs on `n` nodes.
pub fn random_graph(n: usize, m: usize, rng: &mut Rng) -> Result<Fragment> {
    if m > n * n.saturating_sub(1) / 2 {
        return Err(Error::Domain(format!("{m} edges do not fit on {n} nodes")));
    }
    let mut set = HashSet::with_capacity(m);
    let mut edges = Vec::with_capacity(m);
    while edges.len() < m {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u != v && set.insert((u.min(v), u.max(v))) {
            edges.push((u.min(v), u.max(v)));
        }
    }
    Ok(Fragment::new(n, edges))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{connected, validate_graph};

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Brute-force isomorphism over all node mappings.
    fn isomorphic(a: &Fragment, b: &Fragment) -> bool {
        if a.nodes != b.nodes || a.edges.len() != b.edges.len() {
            return false;
        }
        let target: HashSet<_> = b.edges.iter().copied().collect();
        permutations(a.nodes).into_iter().any(|p| {
            a.edges.iter().all(|&(u, v)| {
                let (x, y) = (p[u], p[v]);
                target.contains(&(x.min(y), x.max(y)))
            })
        })
    }

    #[test]
    fn motif_sizes() {
        assert_eq!(make_motif(MotifKind::House).0.edges.len(), 6);
        assert_eq!(make_motif(MotifKind::Cycle5).0.edges.len(), 5);
        assert_eq!(make_motif(MotifKind::Crane).0.edges.len(), 5);
        for k in MotifKind::ALL {
            let (f, _) = make_motif(k);
            assert_eq!(f.nodes, 5);
            assert!(connected(f.nodes, &f.edges));
        }
    }

    #[test]
    fn motifs_pairwise_non_isomorphic() {
        assert_eq!(permutations(5).len(), 120);
        let fs: Vec<_> = MotifKind::ALL.iter().map(|&k| make_motif(k).0).collect();
        for i in 0..3 {
            assert!(isomorphic(&fs[i], &fs[i]));
            for j in i + 1..3 {
                assert!(!isomorphic(&fs[i], &fs[j]), "{i} ~ {j}");
            }
        }
    }

    #[test]
    fn base_families() {
        let mut rng = from_seed(1);
        let star = make_base(BaseKind::Star, 6, &mut rng).unwrap();
        assert_eq!((star.nodes, star.edges.len()), (6, 5));
        let mut deg = vec![0; 6];
        star.edges.iter().for_each(|&(u, v)| {
            deg[u] += 1;
            deg[v] += 1
        });
        assert_eq!(deg.iter().filter(|&&d| d == 5).count(), 1);
        let ladder = make_base(BaseKind::Ladder, 8, &mut rng).unwrap();
        assert_eq!((ladder.nodes, ladder.edges.len()), (8, 10));
        for n in 4..30 {
            for kind in BaseKind::ALL {
                if n < kind.min_size() {
                    continue;
                }
                let f = make_base(kind, n, &mut rng).unwrap();
                assert_eq!(f.nodes, n);
                assert!(connected(n, &f.edges), "{kind} {n}");
                if kind == BaseKind::Tree {
                    assert_eq!(f.edges.len(), n - 1);
                }
            }
        }
        assert!(make_base(BaseKind::Wheel, 4, &mut rng).is_err());
        assert!(make_base(BaseKind::Path, 3, &mut rng).is_err());
    }

    #[test]
    fn star_plus_house() {
        let mut rng = from_seed(5);
        let base = make_base(BaseKind::Star, 6, &mut rng).unwrap();
        let (motif, y) = make_motif(MotifKind::House);
        let g = assemble(&base, &motif, y, "star", 1, &mut rng);
        assert_eq!(g.num_nodes, 11);
        assert_eq!(g.edges.len(), 12);
        let mask = g.gt_edge_mask.as_ref().unwrap();
        assert_eq!(mask.iter().map(|&b| b as usize).sum::<usize>(), 6);
        assert!(g.is_connected());
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn ground_truth_edges_form_the_motif() {
        let mut rng = from_seed(9);
        for kind in MotifKind::ALL {
            for base_kind in BaseKind::ALL {
                let base = make_base(base_kind, 12, &mut rng).unwrap();
                let (motif, y) = make_motif(kind);
                let g = assemble(&base, &motif, y, "x", 1, &mut rng);
                let mask = g.gt_edge_mask.as_ref().unwrap();
                let gt: Vec<_> = g.edges.iter().zip(mask).filter(|(_, &m)| m == 1).map(|(&e, _)| e).collect();
                let nodes: BTreeSet<usize> = gt.iter().flat_map(|&(u, v)| [u, v]).collect();
                assert_eq!(nodes.len(), 5);
                let relabel: Vec<usize> = nodes.iter().copied().collect();
                let local = gt
                    .iter()
                    .map(|&(u, v)| {
                        let a = relabel.binary_search(&u).unwrap();
                        let b = relabel.binary_search(&v).unwrap();
                        (a.min(b), a.max(b))
                    })
                    .collect();
                assert!(isomorphic(&Fragment::new(5, local), &motif), "{kind} on {base_kind}");
            }
        }
    }

    fn small(shift: Shift) -> GenConfig {
        let mut cfg = GenConfig::for_shift(shift, 42);
        cfg.train.n = 300;
        cfg.val.n = 30;
        cfg.test.n = 31;
        cfg
    }

    #[test]
    fn stratified_and_domain_disjoint() {
        for shift in [Shift::Basis, Shift::Size] {
            let cfg = small(shift);
            let (ds, split) = generate_dataset(&cfg).unwrap();
            let mut hist = [0usize; 3];
            for &i in &split.train {
                hist[ds.graphs[i].y] += 1;
            }
            assert_eq!(hist, [100, 100, 100]);
            let mut th = [0usize; 3];
            for &i in &split.test {
                th[ds.graphs[i].y] += 1;
            }
            assert_eq!(th.iter().max().unwrap() - th.iter().min().unwrap(), 1);
            let train_domains: HashSet<_> = split.train.iter().map(|&i| ds.graphs[i].domain.clone()).collect();
            for &i in split.test.iter().chain(&split.val) {
                assert!(!train_domains.contains(&ds.graphs[i].domain));
            }
            for g in &ds.graphs {
                assert!(validate_graph(g).is_empty());
                assert!(g.is_connected());
            }
        }
    }

    #[test]
    fn custom_basis_split_keeps_wheel_out_of_train() {
        let mut cfg = small(Shift::Basis);
        cfg.train.bases = vec![BaseKind::Tree, BaseKind::Ladder, BaseKind::Star];
        cfg.val.bases = vec![BaseKind::Path];
        cfg.test.bases = vec![BaseKind::Wheel];
        let (ds, split) = generate_dataset(&cfg).unwrap();
        assert!(split.train.iter().all(|&i| ds.graphs[i].domain != "wheel"));
        assert!(split.test.iter().all(|&i| ds.graphs[i].domain == "wheel"));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(Shift::Basis);
        cfg.test.bases = vec![BaseKind::Wheel];
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        let mut cfg = small(Shift::Basis);
        cfg.motif_classes = vec![MotifKind::House];
        assert!(generate_dataset(&cfg).is_err());
        let mut cfg = small(Shift::Size);
        cfg.test.sizes = (15, 35);
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn generation_is_a_pure_function_of_config() {
        let cfg = small(Shift::Basis);
        let (a, sa) = generate_dataset(&cfg).unwrap();
        let (b, sb) = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        // per-graph seeding: a smaller train split yields a prefix
        let mut c2 = cfg.clone();
        c2.train.n = 10;
        let (c, _) = generate_dataset(&c2).unwrap();
        assert_eq!(c.graphs[..10], a.graphs[..10]);
    }

    #[test]
    fn rewire_contract() {
        let mut rng = from_seed(3);
        let base = make_base(BaseKind::Star, 6, &mut rng).unwrap();
        let (motif, y) = make_motif(MotifKind::House);
        let g = assemble(&base, &motif, y, "star", 1, &mut rng);
        assert_eq!(rewire_edges(&g, 0.0, &mut rng).unwrap(), g);
        let r = rewire_edges(&g, 0.5, &mut rng).unwrap();
        assert_eq!(r.edges.len(), 12);
        let before: HashSet<_> = g.edges.iter().collect();
        let after: HashSet<_> = r.edges.iter().collect();
        assert_eq!(before.difference(&after).count(), 6);
        assert_eq!(after.difference(&before).count(), 6);
        assert!(r.gt_edge_mask.is_none());
        assert!(validate_graph(&r).is_empty());
    }

    #[test]
    fn rewire_complete_graph_saturates() {
        let edges: Vec<_> = (0..5).flat_map(|u| (u + 1..5).map(move |v| (u, v))).collect();
        let g = Graph {
            id: "k5".into(),
            num_nodes: 5,
            edges,
            x: Matrix::ones(5, 1),
            y: 0,
            domain: "k".into(),
            gt_edge_mask: None,
        };
        assert!(matches!(rewire_edges(&g, 0.2, &mut from_seed(0)), Err(Error::Domain(_))));
    }
}
