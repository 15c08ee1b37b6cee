//! Graph statistics and histogram KL divergences between a reference and a generated set.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::par;

pub const KL_SMOOTHING: f64 = 1e-6;
pub const CONTINUOUS_BINS: usize = 50;
/// Discrete supports run from 0 to the pooled maximum, capped here; larger values
/// land in the overflow bin.
pub const DISCRETE_CAP: usize = 256;

/// Column order of `report.csv`.
pub const REPORT_COLUMNS: [&str; 8] = ["xyz", "deg", "E", "len", "angle", "orient", "b0", "b1"];

/// Normalise, add `KL_SMOOTHING` to every bin, renormalise.
pub fn smooth(h: &[f64]) -> Vec<f64> {
    let total: f64 = h.iter().sum();
    let k = h.len() as f64;
    h.iter()
        .map(|&x| {
            let p = if total > 0.0 { x / total } else { 0.0 };
            (p + KL_SMOOTHING) / (1.0 + k * KL_SMOOTHING)
        })
        .collect()
}

/// `KL(p ‖ q)` between two count vectors after smoothing.
pub fn smoothed_kl(p: &[f64], q: &[f64]) -> f64 {
    let (p, q) = (smooth(p), smooth(q));
    let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    kl.max(0.0)
}

fn components(g: &SpatialGraph) -> Vec<usize> {
    let n = g.num_nodes();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, j, _) in g.edge_list() {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Number of connected components, isolated nodes included.
pub fn betti0(g: &SpatialGraph) -> usize {
    let roots = components(g);
    roots.iter().enumerate().filter(|&(i, &r)| i == r).count()
}

/// Cycle rank `|E| − |V| + β₀`.
pub fn betti1(g: &SpatialGraph) -> usize {
    g.num_edges() + betti0(g) - g.num_nodes()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeStatistics {
    pub lengths: Vec<f64>,
    /// Degrees in `[0, 180]`, one per unordered pair of edges sharing a node.
    pub angles: Vec<f64>,
    /// Angle to the x, y and z axis in degrees, folded to `[0, 90]`.
    pub orientation: [Vec<f64>; 3],
    pub degenerate: usize,
}

fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn edge_statistics(g: &SpatialGraph) -> EdgeStatistics {
    let x = g.coords();
    let diff = |i: usize, j: usize| -> [f64; 3] { std::array::from_fn(|a| x[j][a] - x[i][a]) };
    let norm = |d: [f64; 3]| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let mut out = EdgeStatistics::default();
    for (i, j, _) in g.edge_list() {
        let d = diff(i, j);
        let len = norm(d);
        out.lengths.push(len);
        if len == 0.0 {
            out.degenerate += 1;
            continue;
        }
        for (a, o) in out.orientation.iter_mut().enumerate() {
            o.push((d[a].abs() / len).clamp(0.0, 1.0).acos().to_degrees());
        }
    }
    for v in 0..g.num_nodes() {
        let dirs: Vec<[f64; 3]> = g
            .neighbors(v)
            .into_iter()
            .map(|u| diff(v, u))
            .filter(|&d| norm(d) > 0.0)
            .collect();
        for a in 0..dirs.len() {
            for b in a + 1..dirs.len() {
                out.angles.push(angle_deg(dirs[a], dirs[b]));
            }
        }
    }
    out
}

/// Binned masses of both sets on a shared support.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bin_left: Vec<f64>,
    pub bin_right: Vec<f64>,
    pub reference: Vec<f64>,
    pub generated: Vec<f64>,
}

impl Histogram {
    pub fn kl(&self) -> f64 {
        if self.reference.is_empty() {
            return 0.0;
        }
        smoothed_kl(&self.reference, &self.generated)
    }

    fn mass(counts: &[f64]) -> Vec<f64> {
        let total: f64 = counts.iter().sum();
        counts.iter().map(|&c| if total > 0.0 { c / total } else { 0.0 }).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("bin_left,bin_right,ref_mass,gen_mass\n");
        let (r, g) = (Self::mass(&self.reference), Self::mass(&self.generated));
        for k in 0..self.reference.len() {
            s.push_str(&format!("{},{},{},{}\n", self.bin_left[k], self.bin_right[k], r[k], g[k]));
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Uniform bins over the pooled range. Either side may be empty; both empty gives
/// an empty histogram.
pub fn continuous_histogram(reference: &[f64], generated: &[f64], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::invalid("continuous histograms need ≥ 2 bins"));
    }
    let pooled = reference.iter().chain(generated);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in pooled {
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite statistic".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Ok(Histogram {
            bin_left: vec![],
            bin_right: vec![],
            reference: vec![],
            generated: vec![],
        });
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let w = (hi - lo) / bins as f64;
    let count = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in xs {
            let k = (((v - lo) / w) as usize).min(bins - 1);
            h[k] += 1.0;
        }
        h
    };
    Ok(Histogram {
        bin_left: (0..bins).map(|k| lo + k as f64 * w).collect(),
        bin_right: (0..bins).map(|k| lo + (k + 1) as f64 * w).collect(),
        reference: count(reference),
        generated: count(generated),
    })
}

/// Integer support `0..=max` of the pooled values (capped), plus an overflow bin.
pub fn discrete_histogram(reference: &[usize], generated: &[usize]) -> Histogram {
    let top = reference.iter().chain(generated).copied().max();
    let Some(top) = top else {
        return Histogram {
            bin_left: vec![],
            bin_right: vec![],
            reference: vec![],
            generated: vec![],
        };
    };
    let top = top.min(DISCRETE_CAP);
    let bins = top + 2;
    let count = |xs: &[usize]| {
        let mut h = vec![0.0; bins];
        for &v in xs {
            h[v.min(top + 1)] += 1.0;
        }
        h
    };
    Histogram {
        bin_left: (0..bins).map(|k| k as f64 - 0.5).collect(),
        bin_right: (0..bins).map(|k| if k + 1 == bins { f64::INFINITY } else { k as f64 + 0.5 }).collect(),
        reference: count(reference),
        generated: count(generated),
    }
}

/// `KL(reference ‖ generated)` of continuous samples on `bins` pooled uniform bins.
pub fn histogram_kl(reference: &[f64], generated: &[f64], bins: usize) -> Result<f64> {
    if reference.is_empty() || generated.is_empty() {
        return Err(Error::invalid("histogram_kl needs non-empty sample sets"));
    }
    Ok(continuous_histogram(reference, generated, bins)?.kl())
}

/// `KL(reference ‖ generated)` of integer samples on their exact support.
pub fn histogram_kl_discrete(reference: &[usize], generated: &[usize]) -> Result<f64> {
    if reference.is_empty() || generated.is_empty() {
        return Err(Error::invalid("histogram_kl needs non-empty sample sets"));
    }
    Ok(discrete_histogram(reference, generated).kl())
}

/// Everything extracted from one graph set, pooled.
#[derive(Clone, Debug, Default)]
pub struct SetStatistics {
    pub coords: [Vec<f64>; 3],
    pub degrees: Vec<usize>,
    pub num_edges: Vec<usize>,
    pub edges: EdgeStatistics,
    pub betti0: Vec<usize>,
    pub betti1: Vec<usize>,
}

pub fn set_statistics(graphs: &[SpatialGraph]) -> SetStatistics {
    let per = par::map_slice(graphs, |g| (edge_statistics(g), betti0(g), betti1(g)));
    let mut s = SetStatistics::default();
    for (g, (es, b0, b1)) in graphs.iter().zip(per) {
        for p in g.coords() {
            for a in 0..3 {
                s.coords[a].push(p[a]);
            }
        }
        s.degrees.extend(g.degrees());
        s.num_edges.push(g.num_edges());
        s.edges.lengths.extend(es.lengths);
        s.edges.angles.extend(es.angles);
        for a in 0..3 {
            s.edges.orientation[a].extend_from_slice(&es.orientation[a]);
        }
        s.edges.degenerate += es.degenerate;
        s.betti0.push(b0);
        s.betti1.push(b1);
    }
    s
}

/// The eight KL columns plus every histogram behind them.
#[derive(Clone, Debug)]
pub struct GraphStatsReport {
    pub xyz: f64,
    pub deg: f64,
    pub num_edges: f64,
    pub length: f64,
    pub angle: f64,
    pub orientation: f64,
    pub betti0: f64,
    pub betti1: f64,
    pub n_ref: usize,
    pub n_gen: usize,
    /// `(name, histogram)`, e.g. `("x", ..)`, `("deg", ..)`, `("theta", ..)`.
    pub histograms: Vec<(String, Histogram)>,
}

impl GraphStatsReport {
    pub fn columns(&self) -> [f64; 8] {
        [
            self.xyz,
            self.deg,
            self.num_edges,
            self.length,
            self.angle,
            self.orientation,
            self.betti0,
            self.betti1,
        ]
    }

    pub fn csv_header() -> String {
        format!("{},method,n_ref,n_gen", REPORT_COLUMNS.join(","))
    }

    pub fn csv_row(&self, method: &str) -> String {
        let cols: Vec<String> = self.columns().iter().map(|v| format!("{v:.6e}")).collect();
        format!("{},{method},{},{}", cols.join(","), self.n_ref, self.n_gen)
    }

    /// Appends a row, writing the header first if the file is new or empty.
    pub fn append_csv(&self, path: &Path, method: &str) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", Self::csv_header())?;
        }
        writeln!(f, "{}", self.csv_row(method))?;
        Ok(())
    }

    pub fn write_histograms(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, h) in &self.histograms {
            h.write_csv(&dir.join(format!("hist_{name}.csv")))?;
        }
        Ok(())
    }
}

pub fn evaluate_sets(reference: &[SpatialGraph], generated: &[SpatialGraph]) -> Result<GraphStatsReport> {
    if reference.is_empty() || generated.is_empty() {
        return Err(Error::invalid("evaluation needs non-empty reference and generated sets"));
    }
    let (r, g) = (set_statistics(reference), set_statistics(generated));
    let mut histograms = Vec::new();
    let mut cont = |name: &str, a: &[f64], b: &[f64]| -> Result<f64> {
        let h = continuous_histogram(a, b, CONTINUOUS_BINS)?;
        let kl = h.kl();
        histograms.push((name.to_string(), h));
        Ok(kl)
    };
    let mut xyz = 0.0;
    for (a, name) in ["x", "y", "z"].iter().enumerate() {
        xyz += cont(name, &r.coords[a], &g.coords[a])? / 3.0;
    }
    let length = cont("len", &r.edges.lengths, &g.edges.lengths)?;
    let angle = cont("angle", &r.edges.angles, &g.edges.angles)?;
    let mut orientation = 0.0;
    for (a, name) in ["theta", "phi", "psi"].iter().enumerate() {
        orientation += cont(name, &r.edges.orientation[a], &g.edges.orientation[a])? / 3.0;
    }
    let mut disc = |name: &str, a: &[usize], b: &[usize]| -> f64 {
        let h = discrete_histogram(a, b);
        let kl = h.kl();
        histograms.push((name.to_string(), h));
        kl
    };
    let deg = disc("deg", &r.degrees, &g.degrees);
    let num_edges = disc("E", &r.num_edges, &g.num_edges);
    let betti0 = disc("b0", &r.betti0, &g.betti0);
    let betti1 = disc("b1", &r.betti1, &g.betti1);
    Ok(GraphStatsReport {
        xyz,
        deg,
        num_edges,
        length,
        angle,
        orientation,
        betti0,
        betti1,
        n_ref: reference.len(),
        n_gen: generated.len(),
        histograms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> SpatialGraph {
        let coords = (0..n).map(|i| [i as f64, (i * i) as f64 * 0.1, 0.0]).collect();
        let e: Vec<(usize, usize, u8)> = edges.iter().map(|&(i, j)| (i, j, 1)).collect();
        SpatialGraph::from_edge_list(coords, &e, 2).unwrap()
    }

    #[test]
    fn betti_examples() {
        assert_eq!(betti0(&graph(5, &[])), 5);
        assert_eq!(betti0(&graph(4, &[(0, 1), (1, 2), (2, 3)])), 1);
        let two = graph(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]);
        assert_eq!(betti0(&two), 2);
        assert_eq!(betti1(&two), 2);
        assert_eq!(betti1(&graph(4, &[(0, 1), (1, 2), (1, 3)])), 0);
        assert_eq!(betti1(&graph(3, &[(0, 1), (1, 2), (0, 2)])), 1);
    }

    #[test]
    fn axis_edge_and_right_angle() {
        let g = SpatialGraph::from_edge_list(vec![[0.0; 3], [1.0, 0.0, 0.0]], &[(0, 1, 1)], 2).unwrap();
        let s = edge_statistics(&g);
        assert_eq!(s.lengths, vec![1.0]);
        assert_eq!(s.orientation[0], vec![0.0]);
        assert_eq!(s.orientation[1], vec![90.0]);
        assert_eq!(s.orientation[2], vec![90.0]);
        let corner = SpatialGraph::from_edge_list(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]],
            &[(0, 1, 1), (1, 2, 1)],
            2,
        )
        .unwrap();
        let s = edge_statistics(&corner);
        assert_eq!(s.angles.len(), 1);
        assert!((s.angles[0] - 90.0).abs() < 1e-12);
    }

    #[test]
    fn zero_length_edges_are_tallied() {
        let g = SpatialGraph::from_edge_list(vec![[0.5; 3], [0.5; 3], [1.0, 0.5, 0.5]], &[(0, 1, 1), (0, 2, 1)], 2)
            .unwrap();
        let s = edge_statistics(&g);
        assert_eq!(s.degenerate, 1);
        assert_eq!(s.lengths.len(), 2);
        assert_eq!(s.orientation[0].len(), 1);
        assert!(s.angles.is_empty());
    }

    #[test]
    fn kl_examples() {
        let a: Vec<f64> = (0..100).map(|i| i as f64 * 0.37).collect();
        assert!(histogram_kl(&a, &a, 50).unwrap() <= 1e-9);
        let kl = histogram_kl(&[0.0, 0.0], &[1.0, 1.0], 2).unwrap();
        let e = KL_SMOOTHING / (1.0 + 2.0 * KL_SMOOTHING);
        let big = 1.0 - e;
        assert!((kl - (big - e) * (big / e).ln()).abs() < 1e-9);
        assert!(kl > 10.0);
        assert!(histogram_kl(&[], &[1.0], 2).is_err());
        assert!(histogram_kl_discrete(&[1], &[]).is_err());
    }

    #[test]
    fn report_header() {
        assert_eq!(GraphStatsReport::csv_header(), "xyz,deg,E,len,angle,orient,b0,b1,method,n_ref,n_gen");
    }
}
