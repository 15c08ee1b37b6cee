//! Spatial graph data model: node coordinates plus a symmetric matrix of
//! categorical edge labels, where class 0 is background (no edge).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    coords: Vec<[f64; 3]>,
    edges: Vec<u8>,
    num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Empty,
    TooFewClasses(usize),
    EdgeMatrixSize { expected: usize, found: usize },
    Asymmetric { i: usize, j: usize },
    SelfLoop { i: usize },
    LabelOutOfRange { i: usize, j: usize, label: u8 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "n ≥ 1 violated"),
            Violation::TooFewClasses(c) => write!(f, "num_classes ≥ 2 violated (got {c})"),
            Violation::EdgeMatrixSize { expected, found } => {
                write!(f, "edge matrix has {found} entries, expected {expected}")
            }
            Violation::Asymmetric { i, j } => write!(f, "asymmetric edge label at ({i},{j})"),
            Violation::SelfLoop { i } => write!(f, "non-background diagonal at {i}"),
            Violation::LabelOutOfRange { i, j, label } => {
                write!(f, "label {label} out of range at ({i},{j})")
            }
        }
    }
}

impl SpatialGraph {
    /// Builds a graph and rejects it if any invariant is violated.
    pub fn new(coords: Vec<[f64; 3]>, edges: Vec<u8>, num_classes: usize) -> Result<Self> {
        let g = Self::from_raw(coords, edges, num_classes);
        let v = g.validate();
        if v.is_empty() {
            Ok(g)
        } else {
            Err(Error::InvalidGraph(v))
        }
    }

    /// Builds a graph without checking invariants. Use [`validate`](Self::validate).
    pub fn from_raw(coords: Vec<[f64; 3]>, edges: Vec<u8>, num_classes: usize) -> Self {
        Self {
            coords,
            edges,
            num_classes,
        }
    }

    /// Graph with the given coordinates and no edges.
    pub fn empty(coords: Vec<[f64; 3]>, num_classes: usize) -> Self {
        let n = coords.len();
        Self::from_raw(coords, vec![BACKGROUND; n * n], num_classes)
    }

    /// Builds a graph from an undirected edge list `(i, j, class)`.
    pub fn from_edge_list(
        coords: Vec<[f64; 3]>,
        list: &[(usize, usize, u8)],
        num_classes: usize,
    ) -> Result<Self> {
        let n = coords.len();
        let mut edges = vec![BACKGROUND; n * n];
        for &(i, j, c) in list {
            if i >= n || j >= n {
                return Err(Error::invalid(format!("edge ({i},{j}) index out of bounds for n={n}")));
            }
            edges[i * n + j] = c;
            edges[j * n + i] = c;
        }
        Self::new(coords, edges, num_classes)
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    /// Row-major n×n label matrix.
    pub fn edges(&self) -> &[u8] {
        &self.edges
    }

    pub fn label(&self, i: usize, j: usize) -> u8 {
        self.edges[i * self.num_nodes() + j]
    }

    pub fn with_coords(&self, coords: Vec<[f64; 3]>) -> Self {
        assert_eq!(coords.len(), self.coords.len());
        Self::from_raw(coords, self.edges.clone(), self.num_classes)
    }

    pub fn with_edges(&self, edges: Vec<u8>) -> Self {
        assert_eq!(edges.len(), self.edges.len());
        Self::from_raw(self.coords.clone(), edges, self.num_classes)
    }

    /// Non-background undirected edges `(i, j, class)` with `i < j`.
    pub fn edge_list(&self) -> Vec<(usize, usize, u8)> {
        let n = self.num_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let c = self.edges[i * n + j];
                if c != BACKGROUND {
                    out.push((i, j, c));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edge_list().len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let n = self.num_nodes();
        (0..n)
            .map(|i| (0..n).filter(|&j| j != i && self.edges[i * n + j] != BACKGROUND).count())
            .collect()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let n = self.num_nodes();
        (0..n)
            .filter(|&j| j != i && self.edges[i * n + j] != BACKGROUND)
            .collect()
    }

    /// Every invariant violation, with locations. Empty iff the graph is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.coords.len();
        if n == 0 {
            out.push(Violation::Empty);
        }
        if self.num_classes < 2 {
            out.push(Violation::TooFewClasses(self.num_classes));
        }
        if self.edges.len() != n * n {
            out.push(Violation::EdgeMatrixSize {
                expected: n * n,
                found: self.edges.len(),
            });
            return out;
        }
        for i in 0..n {
            if self.edges[i * n + i] != BACKGROUND {
                out.push(Violation::SelfLoop { i });
            }
            for j in 0..n {
                let l = self.edges[i * n + j];
                if l as usize >= self.num_classes {
                    out.push(Violation::LabelOutOfRange { i, j, label: l });
                }
                if i < j && l != self.edges[j * n + i] {
                    out.push(Violation::Asymmetric { i, j });
                }
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }
}

/// Per-axis affine map `(x - shift) / scale` onto [-1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetNormalization {
    pub shift: [f64; 3],
    pub scale: [f64; 3],
    #[serde(default)]
    pub degenerate: [bool; 3],
}

impl DatasetNormalization {
    pub fn identity() -> Self {
        Self {
            shift: [0.0; 3],
            scale: [1.0; 3],
            degenerate: [false; 3],
        }
    }

    /// Min–max fit over every node of every graph.
    pub fn fit(graphs: &[SpatialGraph]) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for g in graphs {
            for p in g.coords() {
                any = true;
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        if !any {
            return Err(Error::invalid("fit_normalization needs at least one node"));
        }
        let mut shift = [0.0; 3];
        let mut scale = [1.0; 3];
        let mut degenerate = [false; 3];
        for a in 0..3 {
            shift[a] = 0.5 * (lo[a] + hi[a]);
            let half = 0.5 * (hi[a] - lo[a]);
            if half > 0.0 {
                scale[a] = half;
            } else {
                degenerate[a] = true;
            }
        }
        Ok(Self {
            shift,
            scale,
            degenerate,
        })
    }

    pub fn normalize_point(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.shift[a]) / self.scale[a])
    }

    pub fn denormalize_point(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| p[a] * self.scale[a] + self.shift[a])
    }

    pub fn normalize(&self, g: &SpatialGraph) -> SpatialGraph {
        g.with_coords(g.coords().iter().map(|&p| self.normalize_point(p)).collect())
    }

    pub fn denormalize(&self, g: &SpatialGraph) -> SpatialGraph {
        g.with_coords(g.coords().iter().map(|&p| self.denormalize_point(p)).collect())
    }
}

/// Empirical distribution over node counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCountDistribution {
    pub probs: BTreeMap<usize, f64>,
}

impl NodeCountDistribution {
    pub fn fit(graphs: &[SpatialGraph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::invalid("node count distribution needs at least one graph"));
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for g in graphs {
            *counts.entry(g.num_nodes()).or_default() += 1;
        }
        let total = graphs.len() as f64;
        Ok(Self {
            probs: counts.into_iter().map(|(n, c)| (n, c as f64 / total)).collect(),
        })
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 1;
        for (&n, &p) in &self.probs {
            acc += p;
            last = n;
            if u < acc {
                return n;
            }
        }
        last
    }
}

const NODES_HEADER: &str = "id,x,y,z";
const EDGES_HEADER: &str = "src,dst,class";

/// Writes `dir/nodes.csv` and `dir/edges.csv`.
pub fn save_graph(g: &SpatialGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut nodes = String::with_capacity(64 * g.num_nodes());
    nodes.push_str(NODES_HEADER);
    nodes.push('\n');
    for (i, p) in g.coords().iter().enumerate() {
        nodes.push_str(&format!("{i},{:.16e},{:.16e},{:.16e}\n", p[0], p[1], p[2]));
    }
    let mut edges = String::new();
    edges.push_str(EDGES_HEADER);
    edges.push('\n');
    for (i, j, c) in g.edge_list() {
        edges.push_str(&format!("{i},{j},{c}\n"));
    }
    fs::File::create(dir.join("nodes.csv"))?.write_all(nodes.as_bytes())?;
    fs::File::create(dir.join("edges.csv"))?.write_all(edges.as_bytes())?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn check_header(path: &Path, text: &str, header: &str) -> Result<()> {
    match text.lines().next() {
        Some(h) if h.trim() == header => Ok(()),
        Some(h) => Err(parse_err(path, 1, format!("expected header `{header}`, found `{h}`"))),
        None => Err(parse_err(path, 1, format!("missing header `{header}`"))),
    }
}

/// Reads a graph written by [`save_graph`].
pub fn load_graph(dir: &Path, num_classes: usize) -> Result<SpatialGraph> {
    let npath = dir.join("nodes.csv");
    let epath = dir.join("edges.csv");
    let ntext = fs::read_to_string(&npath)?;
    let etext = fs::read_to_string(&epath)?;
    check_header(&npath, &ntext, NODES_HEADER)?;
    check_header(&epath, &etext, EDGES_HEADER)?;

    let mut coords = Vec::new();
    for (lineno, line) in ntext.lines().enumerate().skip(1) {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_err(&npath, line_no, format!("expected 4 fields, found {}", fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(&npath, line_no, format!("bad node id `{}`", fields[0])))?;
        if id != coords.len() {
            return Err(parse_err(&npath, line_no, format!("node id {id} out of sequence")));
        }
        let mut p = [0.0f64; 3];
        for a in 0..3 {
            p[a] = fields[a + 1]
                .parse()
                .map_err(|_| parse_err(&npath, line_no, format!("bad coordinate `{}`", fields[a + 1])))?;
            if !p[a].is_finite() {
                return Err(parse_err(&npath, line_no, "non-finite coordinate"));
            }
        }
        coords.push(p);
    }
    if coords.is_empty() {
        return Err(parse_err(&npath, 1, "n ≥ 1 violated"));
    }

    let n = coords.len();
    let mut edges = vec![BACKGROUND; n * n];
    for (lineno, line) in etext.lines().enumerate().skip(1) {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(&epath, line_no, format!("expected 3 fields, found {}", fields.len())));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| parse_err(&epath, line_no, format!("bad integer `{s}`")))
        };
        let (i, j, c) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        if i >= n || j >= n {
            return Err(parse_err(&epath, line_no, format!("index out of bounds ({i},{j}) for n={n}")));
        }
        if c > u8::MAX as usize {
            return Err(Error::InvalidGraph(vec![Violation::LabelOutOfRange {
                i,
                j,
                label: u8::MAX,
            }]));
        }
        if edges[i * n + j] != BACKGROUND {
            return Err(parse_err(&epath, line_no, format!("duplicate edge ({i},{j})")));
        }
        edges[i * n + j] = c as u8;
        edges[j * n + i] = c as u8;
    }
    SpatialGraph::new(coords, edges, num_classes)
}

/// Contents of `meta.json` at the root of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub normalization: DatasetNormalization,
    pub node_counts: NodeCountDistribution,
    /// Pair-level class frequencies (background included) over the training split.
    pub edge_marginal: Vec<f64>,
    #[serde(default)]
    pub family: Option<String>,
    pub num_graphs: usize,
}

impl DatasetMeta {
    pub fn fit(graphs: &[SpatialGraph], family: Option<String>) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::invalid("dataset must contain at least one graph"))?;
        let c = first.num_classes();
        Ok(Self {
            num_classes: c,
            normalization: DatasetNormalization::fit(graphs)?,
            node_counts: NodeCountDistribution::fit(graphs)?,
            edge_marginal: edge_marginal(graphs, c),
            family,
            num_graphs: graphs.len(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Class frequencies over all unordered off-diagonal pairs.
pub fn edge_marginal(graphs: &[SpatialGraph], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    let mut total = 0usize;
    for g in graphs {
        let n = g.num_nodes();
        for i in 0..n {
            for j in i + 1..n {
                counts[g.label(i, j) as usize] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        let mut m = vec![0.0; num_classes];
        m[0] = 1.0;
        return m;
    }
    counts.iter().map(|&k| k as f64 / total as f64).collect()
}

/// Writes `root/<split>/<id>/{nodes,edges}.csv` for each graph plus `root/meta.json`.
pub fn write_dataset(
    root: &Path,
    split: &str,
    graphs: &[SpatialGraph],
    meta: &DatasetMeta,
) -> Result<()> {
    let width = graphs.len().saturating_sub(1).to_string().len().max(4);
    for (i, g) in graphs.iter().enumerate() {
        save_graph(g, &root.join(split).join(format!("g{:0width$}", i, width = width)))?;
    }
    meta.save(&root.join("meta.json"))
}

/// Every directory under `root` (inclusive) that contains a `nodes.csv`, sorted.
pub fn find_graph_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("nodes.csv").is_file() {
            out.push(dir.clone());
        }
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every graph under `root`. The class count comes from `root/meta.json`
/// when present, otherwise from the largest label seen.
pub fn load_graph_set(root: &Path) -> Result<Vec<SpatialGraph>> {
    if !root.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", root.display())));
    }
    let meta_path = root.join("meta.json");
    let dirs = find_graph_dirs(root)?;
    let classes = if meta_path.is_file() {
        DatasetMeta::load(&meta_path)?.num_classes
    } else {
        let mut max_label = 1usize;
        for d in &dirs {
            let g = load_graph(d, 256)?;
            max_label = max_label.max(g.edges().iter().copied().max().unwrap_or(0) as usize);
        }
        max_label + 1
    };
    dirs.iter().map(|d| load_graph(d, classes)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_graph_is_valid() {
        let g = SpatialGraph::from_raw(vec![[0.0; 3]], vec![0], 2);
        assert!(g.validate().is_empty());
    }

    #[test]
    fn asymmetry_reported_once() {
        let g = SpatialGraph::from_raw(vec![[0.0; 3]; 2], vec![0, 1, 2, 0], 4);
        assert_eq!(g.validate(), vec![Violation::Asymmetric { i: 0, j: 1 }]);
    }

    #[test]
    fn self_loop_reported() {
        let g = SpatialGraph::from_raw(vec![[0.0; 3]; 2], vec![3, 0, 0, 0], 4);
        assert_eq!(g.validate(), vec![Violation::SelfLoop { i: 0 }]);
    }

    #[test]
    fn label_range_and_empty() {
        let g = SpatialGraph::from_raw(vec![[0.0; 3]; 2], vec![0, 5, 5, 0], 4);
        assert_eq!(g.validate().len(), 2);
        let e = SpatialGraph::from_raw(vec![], vec![], 4);
        assert_eq!(e.validate(), vec![Violation::Empty]);
    }

    #[test]
    fn minmax_fit() {
        let g = SpatialGraph::empty(vec![[0.0, 0.0, 0.0], [2.0, 4.0, 8.0]], 2);
        let norm = DatasetNormalization::fit(&[g.clone()]).unwrap();
        assert_eq!(norm.shift, [1.0, 2.0, 4.0]);
        assert_eq!(norm.scale, [1.0, 2.0, 4.0]);
        let n = norm.normalize(&g);
        assert_eq!(n.coords(), &[[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]);
    }

    #[test]
    fn degenerate_axes_flagged() {
        let g = SpatialGraph::empty(vec![[5.0, 5.0, 5.0]; 3], 2);
        let norm = DatasetNormalization::fit(&[g]).unwrap();
        assert_eq!(norm.shift, [5.0; 3]);
        assert_eq!(norm.scale, [1.0; 3]);
        assert_eq!(norm.degenerate, [true; 3]);
    }

    #[test]
    fn fit_needs_nodes() {
        assert!(DatasetNormalization::fit(&[]).is_err());
    }

    #[test]
    fn node_counts_sum_to_one() {
        let gs: Vec<_> = (1..=5).map(|n| SpatialGraph::empty(vec![[0.0; 3]; n % 3 + 1], 2)).collect();
        let d = NodeCountDistribution::fit(&gs).unwrap();
        let s: f64 = d.probs.values().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(d.probs.len(), 3);
    }

    #[test]
    fn header_only_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("nodes.csv"), "id,x,y,z\n").unwrap();
        fs::write(dir.path().join("edges.csv"), "src,dst,class\n").unwrap();
        let err = load_graph(dir.path(), 4).unwrap_err();
        assert!(err.to_string().contains("n ≥ 1 violated"), "{err}");
    }

    #[test]
    fn out_of_bounds_edge_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("nodes.csv"), "id,x,y,z\n0,0,0,0\n1,1,1,1\n").unwrap();
        fs::write(dir.path().join("edges.csv"), "src,dst,class\n0,2,1\n").unwrap();
        let err = load_graph(dir.path(), 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("index out of bounds"), "{msg}");
        assert!(msg.contains(":2:"), "line number missing: {msg}");
    }

    #[test]
    fn label_out_of_range_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("nodes.csv"), "id,x,y,z\n0,0,0,0\n1,1,1,1\n").unwrap();
        fs::write(dir.path().join("edges.csv"), "src,dst,class\n0,1,7\n").unwrap();
        assert!(matches!(load_graph(dir.path(), 4), Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("nodes.csv"), "id,x,y,z\n0,0,0,0\n1,abc,1,1\n").unwrap();
        fs::write(dir.path().join("edges.csv"), "src,dst,class\n").unwrap();
        match load_graph(dir.path(), 4) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
