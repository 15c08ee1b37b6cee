//! Built-in oracle suite behind the `verify` command.

use std::collections::VecDeque;
use std::time::Instant;

use rand::Rng;

use crate::edgediff::{draw_edge_noise, edge_loss_tape, EdgeLossConfig, EdgeNoiseModel};
use crate::error::Result;
use crate::graph::SpatialGraph;
use crate::metrics::{betti0, betti1};
use crate::nets::{EdgeDenoiser, EdgeNetConfig, NodeDenoiser, NodeNetConfig};
use crate::nodediff::{draw_node_noise, node_loss_tape, NodeBatch};
use crate::rng::{named, StreamRng};
use crate::schedule::NoiseSchedule;
use crate::tensor::{cross_entropy_logits, grad_check, grad_check_params, scaled_dot_attention, Tape, Tensor, Var};

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Deliberately corrupts the posterior under test so the harness can be checked.
    pub break_posterior: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn random_marginal(c: usize, rng: &mut StreamRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn random_schedule(steps: usize, rng: &mut StreamRng) -> Result<NoiseSchedule> {
    let alphas: Vec<f64> = (0..steps).map(|_| rng.random_range(0.5..1.0)).collect();
    NoiseSchedule::from_alphas(&alphas)
}

fn check_transitions(rng: &mut StreamRng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut worst_row: f64 = 0.0;
    for c in [2, 3, 4, 14] {
        let nm = EdgeNoiseModel::new(random_marginal(c, rng), random_schedule(50, rng)?)?;
        for t in 0..=50 {
            let closed = nm.q_bar_closed_form(t);
            for (a, b) in nm.q_bar(t).iter().zip(&closed) {
                worst = worst.max((a - b).abs());
            }
            for q in [nm.q(t), nm.q_bar(t)] {
                for r in q.chunks(c) {
                    worst_row = worst_row.max((r.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    Ok((
        worst < 1e-9 && worst_row < 1e-12,
        format!("max |iterated − closed| = {worst:.2e}, max |row sum − 1| = {worst_row:.2e}"),
    ))
}

/// Bayes rule over the joint `(E⁰ = j, E^{t−1} = k)` with `Ê⁰` as the prior on `E⁰`.
fn bayes_posterior(nm: &EdgeNoiseModel, a: usize, e0: &[f64], t: usize, transpose: bool) -> Vec<f64> {
    let c = nm.num_classes();
    let (q, qb) = (nm.q(t), nm.q_bar(t - 1));
    let mut joint = vec![0.0; c];
    for (j, &pj) in e0.iter().enumerate() {
        for (k, slot) in joint.iter_mut().enumerate() {
            let step = if transpose { q[a * c + k] } else { q[k * c + a] };
            *slot += pj * qb[j * c + k] * step;
        }
    }
    let z: f64 = joint.iter().sum();
    joint.into_iter().map(|v| v / z).collect()
}

fn check_posterior(rng: &mut StreamRng, broken: bool) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut models = Vec::new();
    for c in 2..=4 {
        models.push(EdgeNoiseModel::new(random_marginal(c, rng), random_schedule(30, rng)?)?);
    }
    for _ in 0..10_000 {
        let nm = &models[rng.random_range(0..models.len())];
        let c = nm.num_classes();
        let e0 = random_marginal(c, rng);
        let t = rng.random_range(1..=30);
        let a = rng.random_range(0..c);
        let got = nm.posterior(a, &e0, t)?;
        let want = bayes_posterior(nm, a, &e0, t, broken);
        for (x, y) in got.iter().zip(&want) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((worst < 1e-10, format!("max abs error {worst:.2e} over 10000 triples")))
}

/// Projects `y` onto fixed pseudo-random weights so every output entry reaches the scalar.
fn project(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |k| (k as f64 * 1.7 + 0.3).sin());
    let w = t.leaf(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type Unary<'a> = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>;

/// Worst relative gradient error of every differentiable tape primitive, one entry per
/// (op, argument). Straight-through is excluded: its forward value does not move with
/// its input, so central differences cannot see the gradient it passes on.
pub fn primitive_grad_errors(rng: &mut StreamRng) -> Result<Vec<(&'static str, f64)>> {
    let mut rand_t = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
    let a = rand_t(&[3, 4], -1.0, 1.0);
    let b = rand_t(&[3, 4], -1.0, 1.0);
    let w = rand_t(&[4, 5], -1.0, 1.0);
    let a3 = rand_t(&[2, 3, 4], -1.0, 1.0);
    let b3 = rand_t(&[2, 4, 3], -1.0, 1.0);
    let v4 = rand_t(&[4], -1.0, 1.0);
    let pos = rand_t(&[3, 4], 0.5, 2.0);
    let table = rand_t(&[5, 3], -1.0, 1.0);
    let probs = rand_t(&[5, 5], 0.05, 0.95);
    let signs = rand_t(&[3, 4], 0.1, 1.0);
    let relu_in = Tensor::from_fn(&[3, 4], |k| if k % 2 == 0 { signs.data()[k] } else { -signs.data()[k] });
    let gumbel = rand_t(&[3, 4], -1.0, 2.0);
    let u = rand_t(&[3, 4], -1.0, 1.0);
    let leaf = |t: &mut Tape, x: &Tensor| t.leaf(x.clone());

    let cases: Vec<(&'static str, Tensor, Unary)> = vec![
        ("add", a.clone(), Box::new(|t, x| { let y = leaf(t, &b); t.add(x, y) })),
        ("sub/lhs", a.clone(), Box::new(|t, x| { let y = leaf(t, &b); t.sub(x, y) })),
        ("sub/rhs", a.clone(), Box::new(|t, x| { let y = leaf(t, &b); t.sub(y, x) })),
        ("mul", a.clone(), Box::new(|t, x| { let y = leaf(t, &b); t.mul(x, y) })),
        ("mul/self", a.clone(), Box::new(|t, x| t.mul(x, x))),
        ("add_broadcast/lhs", a3.clone(), Box::new(|t, x| { let y = leaf(t, &v4); t.add_broadcast(x, y) })),
        ("add_broadcast/rhs", v4.clone(), Box::new(|t, x| { let y = leaf(t, &a3); t.add_broadcast(y, x) })),
        ("mul_broadcast/lhs", a3.clone(), Box::new(|t, x| { let y = leaf(t, &v4); t.mul_broadcast(x, y) })),
        ("mul_broadcast/rhs", v4.clone(), Box::new(|t, x| { let y = leaf(t, &a3); t.mul_broadcast(y, x) })),
        ("scale", a.clone(), Box::new(|t, x| Ok(t.scale(x, -1.3)))),
        ("add_scalar", a.clone(), Box::new(|t, x| { let y = t.add_scalar(x, 0.7); t.mul(y, y) })),
        ("matmul/lhs", a.clone(), Box::new(|t, x| { let y = leaf(t, &w); t.matmul(x, y) })),
        ("matmul/rhs", w.clone(), Box::new(|t, x| { let y = leaf(t, &a); t.matmul(y, x) })),
        ("matmul_shared/lhs", a3.clone(), Box::new(|t, x| { let y = leaf(t, &w); t.matmul(x, y) })),
        ("matmul_shared/rhs", w.clone(), Box::new(|t, x| { let y = leaf(t, &a3); t.matmul(y, x) })),
        ("matmul_batched/lhs", a3.clone(), Box::new(|t, x| { let y = leaf(t, &b3); t.matmul(x, y) })),
        ("matmul_batched/rhs", b3.clone(), Box::new(|t, x| { let y = leaf(t, &a3); t.matmul(y, x) })),
        ("transpose", a.clone(), Box::new(|t, x| t.transpose(x))),
        ("permute3", a3.clone(), Box::new(|t, x| t.permute3(x, [2, 0, 1]))),
        ("reshape", a3.clone(), Box::new(|t, x| t.reshape(x, &[6, 4]))),
        ("concat", a.clone(), Box::new(|t, x| { let y = leaf(t, &b); t.concat(&[y, x, x]) })),
        ("slice_last", a.clone(), Box::new(|t, x| t.slice_last(x, 1, 2))),
        ("sum", a.clone(), Box::new(|t, x| { let y = t.mul(x, x)?; Ok(t.sum(y)) })),
        ("mean", a.clone(), Box::new(|t, x| { let y = t.mul(x, x)?; Ok(t.mean(y)) })),
        ("sum_axis/0", a3.clone(), Box::new(|t, x| t.sum_axis(x, 0))),
        ("sum_axis/1", a3.clone(), Box::new(|t, x| t.sum_axis(x, 1))),
        ("sum_axis/2", a3.clone(), Box::new(|t, x| t.sum_axis(x, 2))),
        ("relu", relu_in.clone(), Box::new(|t, x| Ok(t.relu(x)))),
        ("gelu", a.clone(), Box::new(|t, x| Ok(t.gelu(x)))),
        ("exp", a.clone(), Box::new(|t, x| Ok(t.exp(x)))),
        ("ln", pos.clone(), Box::new(|t, x| Ok(t.ln(x)))),
        ("recip", pos.clone(), Box::new(|t, x| Ok(t.recip(x)))),
        ("softmax", a.clone(), Box::new(|t, x| Ok(t.softmax(x)))),
        ("log_softmax", a.clone(), Box::new(|t, x| Ok(t.log_softmax(x)))),
        ("layer_norm/x", a.clone(), Box::new(|t, x| { let (g, c) = (leaf(t, &v4), leaf(t, &v4)); t.layer_norm(x, g, c) })),
        ("layer_norm/gamma", v4.clone(), Box::new(|t, x| { let (y, c) = (leaf(t, &a), leaf(t, &v4)); t.layer_norm(y, x, c) })),
        ("layer_norm/beta", v4.clone(), Box::new(|t, x| { let (y, g) = (leaf(t, &a), leaf(t, &v4)); t.layer_norm(y, g, x) })),
        ("embedding", table.clone(), Box::new(|t, x| t.embedding(x, &[4, 0, 4, 2]))),
        ("outer_add/lhs", a.clone(), Box::new(|t, x| { let y = leaf(t, &b); t.outer_add(x, y) })),
        ("outer_add/rhs", b.clone(), Box::new(|t, x| { let y = leaf(t, &a); t.outer_add(y, x) })),
        ("count_histogram", probs.clone(), Box::new(|t, x| t.count_histogram(x, 3))),
        ("count_histogram/wide", probs.clone(), Box::new(|t, x| t.count_histogram(x, 8))),
        ("gumbel_softmax/relaxed", u.clone(), Box::new(|t, x| t.gumbel_softmax_with_noise(x, &gumbel, 0.7, false))),
        ("cross_entropy", a3.clone(), Box::new(|t, x| {
            let y = t.reshape(x, &[6, 4])?;
            cross_entropy_logits(t, y, &[0, 3, 1, 2, 2, 1], &[1.0, 0.5, 2.0, 1.0, 0.0, 1.0])
        })),
        ("attention", a3.clone(), Box::new(|t, x| {
            let (k, v) = (leaf(t, &b3), leaf(t, &b3));
            let k = t.permute3(k, [0, 2, 1])?;
            let v = t.permute3(v, [0, 2, 1])?;
            scaled_dot_attention(t, x, k, v, None, Some(&[true, true, false]))
        })),
    ];
    cases
        .into_iter()
        .map(|(name, x, f)| Ok((name, grad_check(|t, v| { let y = f(t, v)?; project(t, y) }, &x, 1e-5)?)))
        .collect()
}

fn check_primitives(rng: &mut StreamRng) -> Result<(bool, String)> {
    let errs = primitive_grad_errors(rng)?;
    let (name, worst) = errs.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    Ok((worst < 1e-6, format!("{} ops, max relative error {worst:.2e} ({name})", errs.len())))
}

fn five_node_graph(c: usize, rng: &mut StreamRng) -> Result<SpatialGraph> {
    let coords: Vec<[f64; 3]> = (0..5).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let edges = [(0, 1, 1), (1, 2, (c - 1) as u8), (2, 3, 1), (3, 0, 1), (1, 4, 1)];
    SpatialGraph::from_edge_list(coords, &edges, c)
}

fn check_node_loss(rng: &mut StreamRng) -> Result<(bool, String)> {
    let cfg = NodeNetConfig { width: 8, blocks: 2, heads: 2, time_dim: 8 };
    let (net, store) = NodeDenoiser::new(cfg, rng);
    let schedule = NoiseSchedule::cosine(50)?;
    let g = five_node_graph(3, rng)?;
    let batch = NodeBatch::from_graphs(&[g])?;
    let draws = draw_node_noise(&batch, &schedule, rng);
    let err = grad_check_params(|t, s| node_loss_tape(t, &net, s, &batch, &draws, &schedule), &store, 1e-5, 1)?;
    Ok((err < 1e-4, format!("max relative error {err:.2e} over {} parameters", store.num_scalars())))
}

fn check_edge_loss(rng: &mut StreamRng) -> Result<(bool, String)> {
    let cfg = EdgeNetConfig { num_classes: 3, node_width: 8, edge_width: 6, blocks: 2, heads: 2, time_dim: 8 };
    let (net, store) = EdgeDenoiser::new(cfg, rng);
    let nm = EdgeNoiseModel::new(vec![0.6, 0.25, 0.15], NoiseSchedule::cosine(50)?)?;
    let graphs = vec![five_node_graph(3, rng)?];
    let draws = draw_edge_noise(&nm, &graphs, rng)?;
    let loss = EdgeLossConfig { hard: false, ..EdgeLossConfig::default() };
    let err = grad_check_params(|t, s| edge_loss_tape(t, &net, s, &graphs, &draws, &loss), &store, 1e-5, 1)?;
    Ok((err < 1e-4, format!("max relative error {err:.2e} (relaxed degree term)")))
}

fn random_graph(rng: &mut StreamRng) -> Result<SpatialGraph> {
    let n = rng.random_range(1..=20);
    let p = rng.random_range(0.0..0.4);
    let mut list = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                list.push((i, j, 1u8));
            }
        }
    }
    SpatialGraph::from_edge_list(vec![[0.0; 3]; n], &list, 2)
}

fn check_betti(rng: &mut StreamRng) -> Result<(bool, String)> {
    let mut bad = 0;
    for _ in 0..1000 {
        let g = random_graph(rng)?;
        let n = g.num_nodes();
        let mut seen = vec![false; n];
        let mut comps = 0;
        let mut tree_edges = 0;
        for s in 0..n {
            if seen[s] {
                continue;
            }
            comps += 1;
            seen[s] = true;
            let mut queue = VecDeque::from([s]);
            while let Some(v) = queue.pop_front() {
                for u in g.neighbors(v) {
                    if !seen[u] {
                        seen[u] = true;
                        tree_edges += 1;
                        queue.push_back(u);
                    }
                }
            }
        }
        let cycles = g.num_edges() - tree_edges;
        if betti0(&g) != comps || betti1(&g) != cycles {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} mismatches over 1000 graphs")))
}

fn check_schedule() -> Result<(bool, String)> {
    let s = NoiseSchedule::cosine(1000)?;
    let mut ok = s.alpha_bar(1000) < 1e-3 && s.alpha(1) > 0.99;
    let mut acc = 1.0;
    for t in 1..=1000 {
        acc *= s.alpha(t);
        ok &= s.alpha_bar(t) < s.alpha_bar(t - 1) && (acc - s.alpha_bar(t)).abs() < 1e-12;
    }
    Ok((ok, format!("alpha_bar[T] = {:.2e}", s.alpha_bar(1000))))
}

/// Runs every check; a check that errors counts as failed.
pub fn run_checks(opts: &VerifyOptions) -> Vec<CheckResult> {
    type Check<'a> = (&'static str, Box<dyn Fn(&mut StreamRng) -> Result<(bool, String)> + 'a>);
    let broken = opts.break_posterior;
    let checks: Vec<Check> = vec![
        ("schedule_invariants", Box::new(|_| check_schedule())),
        ("transition_cumulative_closed_form", Box::new(check_transitions)),
        ("edge_posterior_vs_bayes", Box::new(move |r| check_posterior(r, broken))),
        ("grad_primitives", Box::new(check_primitives)),
        ("grad_node_loss", Box::new(check_node_loss)),
        ("grad_edge_loss", Box::new(check_edge_loss)),
        ("betti_oracles", Box::new(check_betti)),
    ];
    checks
        .into_iter()
        .enumerate()
        .map(|(k, (name, f))| {
            let clock = Instant::now();
            let mut rng = named(opts.seed, name, &[k as u64]);
            let (passed, detail) = match f(&mut rng) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name,
                passed,
                detail,
                seconds: clock.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broken_posterior_is_detected() {
        let mut rng = named(1, "t", &[]);
        assert!(check_posterior(&mut rng, false).unwrap().0);
        assert!(!check_posterior(&mut rng, true).unwrap().0);
    }
}
