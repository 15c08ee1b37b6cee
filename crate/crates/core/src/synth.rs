//! Procedural vessel-like datasets.
//!
//! `capillary` graphs are random geometric graphs in the unit cube with a handful of
//! cycles and every degree-2 node contracted away; classes 1–3 are length terciles.
//! `cow` graphs jitter one fixed ring-plus-branches template with 13 labelled
//! segment classes and a fixed orientation.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::metrics::betti1;
use crate::par;
use crate::rng::named;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Capillary,
    Cow,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "capillary" => Ok(Self::Capillary),
            "cow" | "cow-like" => Ok(Self::Cow),
            other => Err(Error::Config(format!("unknown family `{other}` (capillary|cow)"))),
        }
    }
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Self::Capillary => "capillary",
            Self::Cow => "cow",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Self::Capillary => 4,
            Self::Cow => 14,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub family: Family,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Inclusive range the number of independent cycles is drawn from before contraction.
    pub cycles: (usize, usize),
    pub seed: u64,
}

pub const CAPILLARY_NEIGHBOURS: usize = 4;
pub const MAX_ATTEMPTS: usize = 500;
pub const COW_JITTER: f64 = 0.05;

impl SynthConfig {
    pub fn capillary(seed: u64) -> Self {
        Self {
            family: Family::Capillary,
            min_nodes: 8,
            max_nodes: 16,
            cycles: (1, 6),
            seed,
        }
    }

    pub fn cow(seed: u64) -> Self {
        let n = cow_template().num_nodes();
        Self {
            family: Family::Cow,
            min_nodes: n,
            max_nodes: n,
            cycles: (1, 1),
            seed,
        }
    }

    pub fn for_family(family: Family, seed: u64) -> Self {
        match family {
            Family::Capillary => Self::capillary(seed),
            Family::Cow => Self::cow(seed),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.family.num_classes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_nodes < 4 || self.max_nodes > 64 || self.min_nodes > self.max_nodes {
            return Err(Error::Config(format!(
                "node range [{}, {}] must lie within [4, 64]",
                self.min_nodes, self.max_nodes
            )));
        }
        if self.cycles.0 > self.cycles.1 {
            return Err(Error::Config("cycle range is empty".into()));
        }
        Ok(())
    }
}

/// Undirected simple graph used while building.
struct Build {
    alive: Vec<bool>,
    adj: Vec<BTreeSet<usize>>,
}

impl Build {
    fn new(n: usize) -> Self {
        Self {
            alive: vec![true; n],
            adj: vec![BTreeSet::new(); n],
        }
    }

    fn link(&mut self, a: usize, b: usize) {
        self.adj[a].insert(b);
        self.adj[b].insert(a);
    }

    fn remove(&mut self, v: usize) {
        for u in std::mem::take(&mut self.adj[v]) {
            self.adj[u].remove(&v);
        }
        self.alive[v] = false;
    }

    /// Replaces every degree-2 node `v` (neighbours `a`, `b`) by the edge `a–b`; when
    /// `a–b` already exists, `v` is simply dropped. Repeats until none are left.
    fn contract_degree_two(&mut self) {
        loop {
            let Some(v) = (0..self.adj.len()).find(|&v| self.alive[v] && self.adj[v].len() == 2) else {
                return;
            };
            let mut it = self.adj[v].iter().copied();
            let (a, b) = (it.next().unwrap(), it.next().unwrap());
            self.remove(v);
            self.link(a, b);
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// One capillary attempt; `None` if the candidate graph is disconnected or the
/// result falls outside the configured ranges.
fn capillary_attempt<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Option<SpatialGraph> {
    let m = rng.random_range(cfg.min_nodes..=(2 * cfg.max_nodes + 4).min(160));
    let pts: Vec<[f64; 3]> = (0..m).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect();

    let mut cand = BTreeSet::new();
    for i in 0..m {
        let mut order: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| dist(pts[i], pts[a]).total_cmp(&dist(pts[i], pts[b])));
        for &j in order.iter().take(CAPILLARY_NEIGHBOURS) {
            cand.insert((i.min(j), i.max(j)));
        }
    }
    let mut cand: Vec<(usize, usize)> = cand.into_iter().collect();
    cand.sort_by(|a, b| dist(pts[a.0], pts[a.1]).total_cmp(&dist(pts[b.0], pts[b.1])));

    let mut parent: Vec<usize> = (0..m).collect();
    let mut g = Build::new(m);
    let mut spare = Vec::new();
    let mut joined = 0;
    for &(a, b) in &cand {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            g.link(a, b);
            joined += 1;
        } else {
            spare.push((a, b));
        }
    }
    if joined + 1 != m {
        return None;
    }
    let target = rng.random_range(cfg.cycles.0..=cfg.cycles.1);
    for &(a, b) in spare.iter().take(target) {
        g.link(a, b);
    }
    g.contract_degree_two();

    let keep: Vec<usize> = (0..m).filter(|&v| g.alive[v]).collect();
    let n = keep.len();
    if n < cfg.min_nodes || n > cfg.max_nodes {
        return None;
    }
    let mut index = vec![usize::MAX; m];
    for (k, &v) in keep.iter().enumerate() {
        index[v] = k;
    }
    let mut list: Vec<(usize, usize, f64)> = Vec::new();
    for &v in &keep {
        for &u in &g.adj[v] {
            if v < u {
                list.push((index[v], index[u], dist(pts[v], pts[u])));
            }
        }
    }
    let mut lengths: Vec<f64> = list.iter().map(|e| e.2).collect();
    lengths.sort_by(f64::total_cmp);
    let cut = |q: usize| lengths.get(lengths.len() * q / 3).copied().unwrap_or(f64::INFINITY);
    let (t1, t2) = (cut(1), cut(2));
    let labelled: Vec<(usize, usize, u8)> = list
        .iter()
        .map(|&(a, b, l)| (a, b, if l < t1 { 1 } else if l < t2 { 2 } else { 3 }))
        .collect();
    let coords = keep.iter().map(|&v| pts[v]).collect();
    let graph = SpatialGraph::from_edge_list(coords, &labelled, Family::Capillary.num_classes()).ok()?;
    (betti1(&graph) >= 1).then_some(graph)
}

/// Capillary-like patch for graph `index` of the configured seed.
pub fn gen_capillary_patch(cfg: &SynthConfig, index: u64) -> Result<SpatialGraph> {
    cfg.validate()?;
    let mut rng = named(cfg.seed, "synth", &[index]);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(g) = capillary_attempt(cfg, &mut rng) {
            return Ok(g);
        }
    }
    Err(Error::Config(format!(
        "capillary generator gave up after {MAX_ATTEMPTS} attempts (seed {}, graph {index})",
        cfg.seed
    )))
}

const COW_RING: usize = 8;
/// Ring node each branch leaves from, and its unit direction.
const COW_BRANCHES: [(usize, [f64; 3]); 5] = [
    (0, [1.0, 0.0, 0.0]),
    (2, [0.0, 1.0, 0.0]),
    (3, [-0.6, 0.8, 0.0]),
    (5, [-0.6, -0.8, 0.0]),
    (6, [0.0, -0.6, -0.8]),
];

/// The unperturbed ring-plus-branches template: an 8-node ellipse in the z = 0 plane,
/// ring segments labelled 1–8, and five two-segment branches labelled 9–13.
pub fn cow_template() -> SpatialGraph {
    let mut coords: Vec<[f64; 3]> = (0..COW_RING)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / COW_RING as f64;
            [0.45 * a.cos(), 0.3 * a.sin(), 0.0]
        })
        .collect();
    let mut edges: Vec<(usize, usize, u8)> = (0..COW_RING)
        .map(|k| (k, (k + 1) % COW_RING, k as u8 + 1))
        .collect();
    for (b, &(root, dir)) in COW_BRANCHES.iter().enumerate() {
        let base = coords[root];
        let class = (COW_RING + 1 + b) as u8;
        let mid = coords.len();
        coords.push(std::array::from_fn(|a| base[a] + 0.25 * dir[a]));
        coords.push(std::array::from_fn(|a| base[a] + 0.5 * dir[a]));
        edges.push((root, mid, class));
        edges.push((mid, mid + 1, class));
    }
    SpatialGraph::from_edge_list(coords, &edges, Family::Cow.num_classes()).expect("template is valid")
}

pub fn gen_cow_like(cfg: &SynthConfig, index: u64) -> Result<SpatialGraph> {
    let mut rng = named(cfg.seed, "synth", &[index]);
    let normal = Normal::new(0.0, COW_JITTER).expect("positive sigma");
    let t = cow_template();
    let coords = t
        .coords()
        .iter()
        .map(|p| std::array::from_fn(|a| p[a] + normal.sample(&mut rng)))
        .collect();
    Ok(t.with_coords(coords))
}

pub fn generate(cfg: &SynthConfig, index: u64) -> Result<SpatialGraph> {
    match cfg.family {
        Family::Capillary => gen_capillary_patch(cfg, index),
        Family::Cow => gen_cow_like(cfg, index),
    }
}

/// `count` graphs, generated in parallel, in index order.
pub fn generate_set(cfg: &SynthConfig, count: usize) -> Result<Vec<SpatialGraph>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("count ≥ 1 required".into()));
    }
    par::try_map_range(count, |i| generate(cfg, i as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::betti0;

    #[test]
    fn capillary_contract() {
        let cfg = SynthConfig::capillary(3);
        let graphs = generate_set(&cfg, 100).unwrap();
        for g in &graphs {
            assert!(g.is_valid());
            assert!((8..=16).contains(&g.num_nodes()));
            assert!(g.degrees().iter().all(|&d| d != 2));
            assert!(betti1(g) >= 1);
        }
    }

    #[test]
    fn contraction_handles_triangles() {
        let mut b = Build::new(3);
        b.link(0, 1);
        b.link(1, 2);
        b.link(0, 2);
        b.contract_degree_two();
        let alive: Vec<usize> = (0..3).filter(|&v| b.alive[v]).collect();
        assert_eq!(alive.len(), 2);
        assert!(alive.iter().all(|&v| b.adj[v].len() == 1));
    }

    #[test]
    fn cow_template_contract() {
        let t = cow_template();
        assert_eq!(betti1(&t), 1);
        assert_eq!(betti0(&t), 1);
        let classes: BTreeSet<u8> = t.edge_list().iter().map(|e| e.2).collect();
        assert_eq!(classes, (1..=13).collect());
        let a = gen_cow_like(&SynthConfig::cow(1), 0).unwrap();
        let b = gen_cow_like(&SynthConfig::cow(1), 1).unwrap();
        assert_eq!(a.edges(), t.edges());
        assert_ne!(a.coords(), b.coords());
    }

    #[test]
    fn zero_count_rejected() {
        assert!(generate_set(&SynthConfig::capillary(0), 0).is_err());
    }
}
