use proptest::prelude::*;
use rand::Rng;
use vesseldiff::edgediff::{
    degree_histogram, degree_kl, degree_loss, edge_ce_loss, sample_edges, CeReduction, EdgeNoiseModel, EdgePredictor,
};
use vesseldiff::graph::SpatialGraph;
use vesseldiff::metrics::smoothed_kl;
use vesseldiff::nodediff::{forward_noise_nodes, node_loss, reverse_step, sample_nodes, NodeBatch, NoisePredictor};
use vesseldiff::rng::stream;
use vesseldiff::schedule::NoiseSchedule;
use vesseldiff::tensor::{ParamStore, Tape, Tensor, Var};
use vesseldiff::Result;

/// Predicts zero noise everywhere.
struct ZeroNoise;

impl NoisePredictor for ZeroNoise {
    fn predict_noise(&self, tape: &mut Tape, _: &ParamStore, x_t: Var, _: &[bool], _: usize) -> Result<Var> {
        Ok(tape.scale(x_t, 0.0))
    }
}

/// Knows the clean coordinates and returns the noise that produced `x_t` from them.
struct ExactNoise {
    x0: Vec<f64>,
    schedule: NoiseSchedule,
}

impl NoisePredictor for ExactNoise {
    fn predict_noise(&self, tape: &mut Tape, _: &ParamStore, x_t: Var, _: &[bool], t: usize) -> Result<Var> {
        let ab = self.schedule.alpha_bar(t);
        let eps: Vec<f64> =
            tape.value(x_t).data().iter().zip(&self.x0).map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect();
        tape.constant(&tape.shape(x_t).to_vec(), eps)
    }
}

/// Emits fixed logits per pair: a one-hot copy of `target`, or a uniform row.
struct FixedLogits {
    c: usize,
    target: Option<Vec<u8>>,
}

impl EdgePredictor for FixedLogits {
    fn num_classes(&self) -> usize {
        self.c
    }

    fn predict_logits(&self, tape: &mut Tape, _: &ParamStore, e_t: &[u8], coords: &[[f64; 3]], _: usize) -> Result<Var> {
        let n = coords.len();
        debug_assert_eq!(e_t.len(), n * n);
        let mut data = vec![0.0; n * n * self.c];
        if let Some(target) = &self.target {
            for (p, &k) in target.iter().enumerate() {
                data[p * self.c + k as usize] = 60.0;
            }
        }
        tape.constant(&[n, n, self.c], data)
    }
}

fn path_graph(n: usize) -> SpatialGraph {
    let coords = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
    let list: Vec<_> = (1..n).map(|i| (i - 1, i, 1u8)).collect();
    SpatialGraph::from_edge_list(coords, &list, 3).unwrap()
}

#[test]
fn zero_noise_scales_by_sqrt_alpha_bar() {
    let s = NoiseSchedule::cosine(50).unwrap();
    let batch = NodeBatch::from_sets(&[vec![[0.5, -0.2, 0.9], [1.0, 0.0, -1.0]]]).unwrap();
    let xt = forward_noise_nodes(&batch, &[17], &[0.0; 6], &s).unwrap();
    for (a, b) in xt.iter().zip(batch.coords()) {
        assert_eq!(*a, s.alpha_bar(17).sqrt() * b);
    }
    assert!(forward_noise_nodes(&batch, &[51], &[0.0; 6], &s).is_err());
}

#[test]
fn composed_one_step_kernel_matches_closed_form() {
    let s = NoiseSchedule::cosine(100).unwrap();
    let mut rng = stream(11, &[]);
    let (x0, t, runs) = (1.5, 40, 100_000);
    let mut vals = Vec::with_capacity(runs);
    for _ in 0..runs {
        let mut x: f64 = x0;
        for k in 1..=t {
            let a = s.alpha(k);
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            x = a.sqrt() * x + (1.0 - a).sqrt() * z;
        }
        vals.push(x);
    }
    let mean = vals.iter().sum::<f64>() / runs as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
    let ab = s.alpha_bar(t);
    assert!((mean / (ab.sqrt() * x0) - 1.0).abs() < 0.01, "{mean}");
    assert!((var / (1.0 - ab) - 1.0).abs() < 0.01, "{var}");
}

#[test]
fn exact_predictor_has_zero_loss() {
    let s = NoiseSchedule::cosine(1).unwrap();
    let coords = vec![[0.2, 0.4, -0.6], [0.0, 1.0, 0.5]];
    let batch = NodeBatch::from_sets(&[coords.clone()]).unwrap();
    let model = ExactNoise { x0: batch.coords().to_vec(), schedule: s.clone() };
    let out = node_loss(&model, &ParamStore::new(), &batch, &s, &mut stream(1, &[])).unwrap();
    assert!(out.loss < 1e-20, "{}", out.loss);
}

#[test]
fn single_step_with_exact_noise_recovers_x0() {
    let s = NoiseSchedule::cosine(1).unwrap();
    let x0 = [0.3, -0.8, 0.55];
    let eps = [0.7, -1.1, 0.2];
    let ab = s.alpha_bar(1);
    let x1: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
    let back = reverse_step(&x1, &eps, &[0.0; 3], 1, &s);
    for (a, b) in back.iter().zip(x0) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn zero_predictor_sampling_follows_variance_recursion() {
    let s = NoiseSchedule::cosine(20).unwrap();
    let mut rng = stream(12, &[]);
    let runs = 10_000;
    let mut vals = Vec::with_capacity(runs * 3);
    for _ in 0..runs {
        for p in sample_nodes(&ZeroNoise, &ParamStore::new(), 1, &s, &mut rng).unwrap() {
            vals.extend_from_slice(&p);
        }
    }
    let mut v = 1.0;
    for t in (1..=20).rev() {
        let a = s.alpha(t);
        v = v / a + if t > 1 { 1.0 - a } else { 0.0 };
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
    assert!((var / v - 1.0).abs() < 0.02, "{var} vs {v}");
}

#[test]
fn node_sampling_is_deterministic_and_finite() {
    let s = NoiseSchedule::cosine(10).unwrap();
    let a = sample_nodes(&ZeroNoise, &ParamStore::new(), 7, &s, &mut stream(3, &[])).unwrap();
    let b = sample_nodes(&ZeroNoise, &ParamStore::new(), 7, &s, &mut stream(3, &[])).unwrap();
    assert_eq!(a.len(), 7);
    assert!(a.iter().flatten().all(|v| v.is_finite()));
    assert_eq!(a, b);
}

#[test]
fn cumulative_transition_at_t_end_is_near_marginal() {
    let m = vec![0.6, 0.3, 0.1];
    let nm = EdgeNoiseModel::new(m.clone(), NoiseSchedule::cosine(200).unwrap()).unwrap();
    for row in nm.q_bar(200).chunks(3) {
        let tv: f64 = row.iter().zip(&m).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 1e-3);
    }
}

#[test]
fn seven_step_product_matches_closed_form() {
    let mut rng = stream(13, &[]);
    let alphas: Vec<f64> = (0..7).map(|_| rng.random_range(0.2..1.0)).collect();
    let nm = EdgeNoiseModel::new(vec![0.4, 0.3, 0.2, 0.1], NoiseSchedule::from_alphas(&alphas).unwrap()).unwrap();
    let mut prod = vec![0.0; 16];
    for i in 0..4 {
        prod[i * 4 + i] = 1.0;
    }
    for t in 1..=7 {
        let q = nm.q(t);
        prod = (0..16).map(|k| (0..4).map(|l| prod[(k / 4) * 4 + l] * q[l * 4 + k % 4]).sum()).collect();
    }
    for (a, b) in prod.iter().zip(nm.q_bar_closed_form(7)) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn first_step_rarely_flips_pairs() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    assert!(s.alpha(1) > 0.99);
    let nm = EdgeNoiseModel::new(vec![0.8, 0.1, 0.1], s).unwrap();
    let g = path_graph(60);
    let et = nm.forward_noise_edges(g.edges(), 60, 1, &mut stream(14, &[])).unwrap();
    let pairs = 60 * 59 / 2;
    let flips = (0..60).flat_map(|i| (i + 1..60).map(move |j| (i, j))).filter(|&(i, j)| et[i * 60 + j] != g.label(i, j)).count();
    assert!((flips as f64) < 0.03 * pairs as f64, "{flips}");
}

#[test]
fn ce_of_exact_and_uniform_predictors() {
    let nm = EdgeNoiseModel::new(vec![0.7, 0.2, 0.1], NoiseSchedule::cosine(50).unwrap()).unwrap();
    let g = path_graph(6);
    let mut rng = stream(15, &[]);
    let exact = FixedLogits { c: 3, target: Some(g.edges().to_vec()) };
    let ce = edge_ce_loss(&exact, &ParamStore::new(), &g, 10, &nm, CeReduction::Mean, &mut rng).unwrap();
    assert!(ce < 1e-9, "{ce}");
    let uniform = FixedLogits { c: 3, target: None };
    let ce = edge_ce_loss(&uniform, &ParamStore::new(), &g, 10, &nm, CeReduction::Mean, &mut rng).unwrap();
    assert!((ce - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn degree_kl_of_matching_histograms_is_at_floor() {
    let g = path_graph(5);
    let h = degree_histogram(g.edges(), 5);
    let mut t = Tape::new();
    let pred = t.constant(&[h.len()], h.clone()).unwrap();
    let kl = degree_kl(&mut t, pred, &h).unwrap();
    assert!(t.value(kl).item().abs() < 1e-6);
}

#[test]
fn hard_degree_loss_counts_argmax_and_takes_relaxed_gradient() {
    let (n, c) = (7, 3);
    let mut rng = stream(12, &[]);
    let logits = Tensor::from_fn(&[n, n, c], |_| rng.random_range(-3.0..3.0));
    let noise = Tensor::from_fn(&[n, n, c], |_| rng.random_range(-1.0..1.0));
    let target = path_graph(n);
    let run = |hard: bool| {
        let mut t = Tape::new();
        let l = t.leaf(logits.clone());
        let kl = degree_loss(&mut t, &[l], &[target.edges()], &[noise.clone()], 1.0, hard).unwrap();
        let value = t.value(kl).item();
        (value, t.backward(kl).unwrap().get(l).unwrap().clone())
    };
    let (hard_value, hard_grad) = run(true);
    let (_, soft_grad) = run(false);
    assert_eq!(hard_grad, soft_grad);
    assert!(hard_grad.data().iter().all(|g| g.is_finite()));

    let mut counts = vec![0.0; degree_histogram(target.edges(), n).len()];
    for i in 0..n {
        let mut d = 0;
        for j in (0..n).filter(|&j| j != i) {
            let z: Vec<f64> = (0..c).map(|k| logits.data()[(i * n + j) * c + k] + noise.data()[(i * n + j) * c + k]).collect();
            d += usize::from(z[0] < z[1].max(z[2]));
        }
        let top = counts.len() - 1;
        counts[d.min(top)] += 1.0;
    }
    let want = smoothed_kl(&degree_histogram(target.edges(), n), &counts);
    assert!((hard_value - want).abs() < 1e-12, "{hard_value} vs {want}");
}

#[test]
fn background_predictor_samples_empty_graph() {
    let nm = EdgeNoiseModel::new(vec![0.7, 0.2, 0.1], NoiseSchedule::cosine(1000).unwrap()).unwrap();
    let coords: Vec<[f64; 3]> = (0..6).map(|i| [i as f64, 0.0, 0.0]).collect();
    let model = FixedLogits { c: 3, target: Some(vec![0; 36]) };
    for seed in 0..5 {
        let e = sample_edges(&model, &ParamStore::new(), &coords, &nm, &mut stream(seed, &[])).unwrap();
        assert!(e.iter().all(|&k| k == 0));
    }
    let single = sample_edges(&model, &ParamStore::new(), &coords[..1], &nm, &mut stream(0, &[])).unwrap();
    assert_eq!(single, vec![0]);
}

#[test]
fn edge_sampling_is_deterministic() {
    let nm = EdgeNoiseModel::new(vec![0.5, 0.3, 0.2], NoiseSchedule::cosine(30).unwrap()).unwrap();
    let coords: Vec<[f64; 3]> = (0..7).map(|i| [i as f64, 1.0, 0.0]).collect();
    let model = FixedLogits { c: 3, target: None };
    let a = sample_edges(&model, &ParamStore::new(), &coords, &nm, &mut stream(9, &[])).unwrap();
    let b = sample_edges(&model, &ParamStore::new(), &coords, &nm, &mut stream(9, &[])).unwrap();
    assert_eq!(a, b);
    assert!(SpatialGraph::new(coords, a, 3).is_ok());
}

proptest! {
    #[test]
    fn corrupted_edges_stay_valid(n in 1usize..12, t in 1usize..=40, seed in any::<u64>()) {
        let nm = EdgeNoiseModel::new(vec![0.5, 0.25, 0.25], NoiseSchedule::cosine(40).unwrap()).unwrap();
        let mut rng = stream(seed, &[]);
        let e0 = nm.sample_prior(n, &mut rng);
        let et = nm.forward_noise_edges(&e0, n, t, &mut rng).unwrap();
        prop_assert!(SpatialGraph::from_raw(vec![[0.0; 3]; n], et, 3).is_valid());
    }

    #[test]
    fn posterior_is_a_distribution(a in 0usize..4, t in 1usize..=30, seed in any::<u64>()) {
        let nm = EdgeNoiseModel::new(vec![0.55, 0.2, 0.15, 0.1], NoiseSchedule::cosine(30).unwrap()).unwrap();
        let mut rng = stream(seed, &[]);
        let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let prior: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let p = nm.posterior(a, &prior, t).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
