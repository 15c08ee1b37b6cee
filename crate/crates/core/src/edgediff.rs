//! Categorical diffusion over the edge matrix with the node coordinates held fixed.
//!
//! Only the strict upper triangle is noised, scored and sampled; the lower triangle is
//! its mirror and the diagonal is always background.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{SpatialGraph, BACKGROUND};
use crate::metrics::{smooth, smoothed_kl, KL_SMOOTHING};
use crate::nodediff::{sum_grads, LossAndGrad};
use crate::par;
use crate::schedule::NoiseSchedule;
use crate::tensor::{cross_entropy_logits, gumbel_noise, ParamStore, Tape, Tensor, Var};

/// Degree histogram support `0..=DEGREE_MAX`, plus one overflow bin.
pub const DEGREE_MAX: usize = 8;
pub const DEGREE_BINS: usize = DEGREE_MAX + 2;

/// Maps a noisy edge matrix and clean coordinates to symmetric class logits `[n, n, c]`.
pub trait EdgePredictor: Sync {
    fn num_classes(&self) -> usize;

    fn predict_logits(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        e_t: &[u8],
        coords: &[[f64; 3]],
        t: usize,
    ) -> Result<Var>;
}

/// `α I + (1−α) 1 mᵀ`, row-major `c × c`.
pub fn build_transition(alpha: f64, m: &[f64]) -> Vec<f64> {
    let c = m.len();
    let mut q = vec![0.0; c * c];
    for r in 0..c {
        for k in 0..c {
            q[r * c + k] = (1.0 - alpha) * m[k] + if r == k { alpha } else { 0.0 };
        }
    }
    q
}

pub fn matmul_square(a: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for k in 0..c {
            let aik = a[i * c + k];
            for j in 0..c {
                out[i * c + j] += aik * b[k * c + j];
            }
        }
    }
    out
}

fn identity(c: usize) -> Vec<f64> {
    let mut q = vec![0.0; c * c];
    for i in 0..c {
        q[i * c + i] = 1.0;
    }
    q
}

/// Marginal `m`, the schedule, and cached `Q^t` / `Q̄^t` (the latter as an explicit
/// running product).
#[derive(Clone, Debug)]
pub struct EdgeNoiseModel {
    m: Vec<f64>,
    schedule: NoiseSchedule,
    q: Vec<Vec<f64>>,
    q_bar: Vec<Vec<f64>>,
}

impl EdgeNoiseModel {
    pub fn new(m: Vec<f64>, schedule: NoiseSchedule) -> Result<Self> {
        if m.len() < 2 {
            return Err(Error::Config(format!("need at least 2 edge classes, got {}", m.len())));
        }
        if m.iter().any(|&p| !(p >= 0.0)) || (m.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("edge marginal must be a probability vector".into()));
        }
        let c = m.len();
        let mut q = vec![identity(c)];
        let mut q_bar = vec![identity(c)];
        for t in 1..=schedule.steps() {
            let qt = build_transition(schedule.alpha(t), &m);
            q_bar.push(matmul_square(&q_bar[t - 1], &qt, c));
            q.push(qt);
        }
        Ok(Self { m, schedule, q, q_bar })
    }

    pub fn num_classes(&self) -> usize {
        self.m.len()
    }

    pub fn marginal(&self) -> &[f64] {
        &self.m
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// `Q^t`; `t = 0` gives the identity.
    pub fn q(&self, t: usize) -> &[f64] {
        &self.q[t]
    }

    /// `Q^1 ⋯ Q^t`; `t = 0` gives the identity.
    pub fn q_bar(&self, t: usize) -> &[f64] {
        &self.q_bar[t]
    }

    pub fn q_bar_closed_form(&self, t: usize) -> Vec<f64> {
        build_transition(self.schedule.alpha_bar(t), &self.m)
    }

    /// Distribution of `E^{t−1}` for one pair given the observed class `a = E^t` and the
    /// predicted clean distribution:
    /// `p(k) ∝ Q^t[k, a] · (Ê⁰ Q̄^{t−1})_k`, normalised by `(Ê⁰ Q̄^t)_a`.
    pub fn posterior(&self, a: usize, e0_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        let c = self.num_classes();
        self.schedule.check_step(t)?;
        if a >= c || e0_hat.len() != c {
            return Err(Error::shape("edge_posterior", &[a, c], &[e0_hat.len()]));
        }
        let (qt, qb_prev, qb) = (&self.q[t], &self.q_bar[t - 1], &self.q_bar[t]);
        let mut norm = 0.0;
        for (j, &p) in e0_hat.iter().enumerate() {
            norm += p * qb[j * c + a];
        }
        if !(norm > 0.0) {
            return Err(Error::Numeric(format!("zero posterior normaliser for observed class {a} at t={t}")));
        }
        let mut out = vec![0.0; c];
        for (k, o) in out.iter_mut().enumerate() {
            let mut prior = 0.0;
            for (j, &p) in e0_hat.iter().enumerate() {
                prior += p * qb_prev[j * c + k];
            }
            *o = qt[k * c + a] * prior / norm;
        }
        Ok(out)
    }

    /// Samples each upper-triangle pair from row `E0[i][j]` of `Q̄^t` and mirrors it.
    pub fn forward_noise_edges<R: Rng + ?Sized>(
        &self,
        e0: &[u8],
        n: usize,
        t: usize,
        rng: &mut R,
    ) -> Result<Vec<u8>> {
        if e0.len() != n * n {
            return Err(Error::shape("forward_noise_edges", &[e0.len()], &[n, n]));
        }
        if t > self.schedule.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [0, {}]", self.schedule.steps())));
        }
        let c = self.num_classes();
        let qb = &self.q_bar[t];
        let mut out = vec![BACKGROUND; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let a = e0[i * n + j] as usize;
                if a >= c {
                    return Err(Error::invalid(format!("edge label {a} out of range")));
                }
                let k = sample_categorical(&qb[a * c..(a + 1) * c], rng) as u8;
                out[i * n + j] = k;
                out[j * n + i] = k;
            }
        }
        Ok(out)
    }

    /// Pairs drawn independently from `m`.
    pub fn sample_prior<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<u8> {
        let mut out = vec![BACKGROUND; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let k = sample_categorical(&self.m, rng) as u8;
                out[i * n + j] = k;
                out[j * n + i] = k;
            }
        }
        out
    }
}

/// Inverse-CDF draw; tolerates rows that sum to 1 only approximately.
pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &w) in p.iter().enumerate() {
        if w > 0.0 {
            last = k;
        }
        acc += w;
        if u < acc {
            return k;
        }
    }
    last
}

pub fn num_pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Per-pair class distributions for the strict upper triangle, in row-major pair order.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeProbBatch {
    n: usize,
    c: usize,
    probs: Vec<f64>,
}

impl EdgeProbBatch {
    /// Softmax of `[n, n, c]` logits, reading the upper triangle.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(Error::shape("edge_prob_batch", s, &[]));
        }
        let (n, c) = (s[0], s[2]);
        let mut probs = Vec::with_capacity(num_pairs(n) * c);
        for i in 0..n {
            for j in i + 1..n {
                let row = &logits.data()[(i * n + j) * c..][..c];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                probs.extend(row.iter().map(|v| (v - mx).exp() / z));
            }
        }
        Ok(Self { n, c, probs })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn num_pairs(&self) -> usize {
        num_pairs(self.n)
    }

    /// Distribution for pair index `p` (see [`pairs`]).
    pub fn pair(&self, p: usize) -> &[f64] {
        &self.probs[p * self.c..(p + 1) * self.c]
    }
}

/// Upper-triangle pairs `(i, j)`, `i < j`, in row-major order.
pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Ancestral edge sampling from the prior `m` at `t = T` down to `E^0`.
pub fn sample_edges<M: EdgePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    params: &ParamStore,
    coords: &[[f64; 3]],
    noise: &EdgeNoiseModel,
    rng: &mut R,
) -> Result<Vec<u8>> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::invalid("n ≥ 1 violated"));
    }
    if model.num_classes() != noise.num_classes() {
        return Err(Error::Config(format!(
            "edge model has {} classes, noise model {}",
            model.num_classes(),
            noise.num_classes()
        )));
    }
    let mut e = noise.sample_prior(n, rng);
    if n == 1 {
        return Ok(e);
    }
    for t in (1..=noise.schedule().steps()).rev() {
        let mut tape = Tape::new();
        let logits = model.predict_logits(&mut tape, params, &e, coords, t)?;
        if !tape.value(logits).is_finite() {
            return Err(Error::Numeric(format!("non-finite edge logits at step {t}")));
        }
        let probs = EdgeProbBatch::from_logits(tape.value(logits))?;
        let mut next = vec![BACKGROUND; n * n];
        for (p, (i, j)) in pairs(n).enumerate() {
            let a = e[i * n + j] as usize;
            let post = noise.posterior(a, probs.pair(p), t).map_err(|err| match err {
                Error::Numeric(msg) => Error::Numeric(format!("pair ({i}, {j}): {msg}")),
                other => other,
            })?;
            let k = sample_categorical(&post, rng) as u8;
            next[i * n + j] = k;
            next[j * n + i] = k;
        }
        e = next;
    }
    Ok(e)
}

/// Gumbel noise shared by `(i, j)` and `(j, i)` so relaxed samples stay symmetric.
pub fn symmetric_gumbel<R: Rng + ?Sized>(n: usize, c: usize, rng: &mut R) -> Tensor {
    let mut out = Tensor::zeros(&[n, n, c]);
    for (i, j) in pairs(n) {
        let g = gumbel_noise(&[c], rng);
        out.data_mut()[(i * n + j) * c..][..c].copy_from_slice(g.data());
        out.data_mut()[(j * n + i) * c..][..c].copy_from_slice(g.data());
    }
    out
}

/// Degree histogram of a target edge matrix on the shared support.
pub fn degree_histogram(edges: &[u8], n: usize) -> Vec<f64> {
    let mut h = vec![0.0; DEGREE_BINS];
    for i in 0..n {
        let d = (0..n).filter(|&j| j != i && edges[i * n + j] != BACKGROUND).count();
        h[d.min(DEGREE_BINS - 1)] += 1.0;
    }
    h
}

/// Predicted degree histogram of one graph from a Gumbel draw.
pub struct DegreeSample {
    /// Relaxed histogram: presence `1 − y_ij[background]` from the Gumbel-softmax,
    /// then the pooled distribution of `Σ_{j≠i} presence_ij` treating presences as
    /// independent coins.
    pub relaxed: Var,
    /// Exact degree counts of the argmax sample.
    pub counts: Vec<f64>,
}

pub fn predicted_degree_histogram(
    tape: &mut Tape,
    logits: Var,
    noise: &Tensor,
    temperature: f64,
) -> Result<DegreeSample> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 3 || s[0] != s[1] {
        return Err(Error::shape("degree_histogram", &s, noise.shape()));
    }
    let (n, c) = (s[0], s[2]);
    let y = tape.gumbel_softmax_with_noise(logits, noise, temperature, false)?;
    let mut degree = vec![0usize; n];
    let classes = tape.value(y).data();
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let row = &classes[(i * n + j) * c..(i * n + j + 1) * c];
            let top = (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            degree[i] += usize::from(top != 0);
        }
    }
    let mut counts = vec![0.0; DEGREE_BINS];
    for d in degree {
        counts[d.min(DEGREE_BINS - 1)] += 1.0;
    }
    let bg = tape.slice_last(y, 0, 1)?;
    let bg = tape.reshape(bg, &[n, n])?;
    let present = tape.scale(bg, -1.0);
    let present = tape.add_scalar(present, 1.0);
    let off: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect();
    let off = tape.constant(&[n, n], off)?;
    let present = tape.mul(present, off)?;
    let relaxed = tape.count_histogram(present, DEGREE_BINS)?;
    Ok(DegreeSample { relaxed, counts })
}

/// `KL(target ‖ predicted)` over smoothed histograms. `pred_hist` holds raw counts
/// summing to `total` (the node count), so normalisation is a constant scale.
pub fn degree_kl(tape: &mut Tape, pred_hist: Var, target_hist: &[f64]) -> Result<Var> {
    let total: f64 = target_hist.iter().sum();
    if !(total > 0.0) || tape.shape(pred_hist) != [target_hist.len()] {
        return Err(Error::shape("degree_kl", tape.shape(pred_hist), &[target_hist.len()]));
    }
    let k = target_hist.len() as f64;
    let p = smooth(target_hist);
    let q = tape.scale(pred_hist, 1.0 / total);
    let q = tape.add_scalar(q, KL_SMOOTHING);
    let q = tape.scale(q, 1.0 / (1.0 + k * KL_SMOOTHING));
    let lq = tape.ln(q);
    let neg_p = tape.constant(&[p.len()], p.iter().map(|v| -v).collect())?;
    let cross = tape.mul(lq, neg_p)?;
    let cross = tape.sum(cross);
    let entropy: f64 = p.iter().map(|v| v * v.ln()).sum();
    Ok(tape.add_scalar(cross, entropy))
}

/// Degree loss over a mini-batch recorded on one tape; histograms are pooled over all
/// graphs before the KL. With `hard` the value is the KL of the argmax samples and the
/// gradient is that of the relaxed KL (straight-through).
pub fn degree_loss(
    tape: &mut Tape,
    logits: &[Var],
    targets: &[&[u8]],
    noise: &[Tensor],
    temperature: f64,
    hard: bool,
) -> Result<Var> {
    if logits.is_empty() || logits.len() != targets.len() || logits.len() != noise.len() {
        return Err(Error::invalid("degree_loss needs one target and one noise tensor per graph"));
    }
    let mut pooled_target = vec![0.0; DEGREE_BINS];
    let mut pooled_counts = vec![0.0; DEGREE_BINS];
    let mut pooled: Option<Var> = None;
    for ((&l, &e0), g) in logits.iter().zip(targets).zip(noise) {
        let n = tape.shape(l)[0];
        for (a, b) in pooled_target.iter_mut().zip(degree_histogram(e0, n)) {
            *a += b;
        }
        let h = predicted_degree_histogram(tape, l, g, temperature)?;
        for (a, b) in pooled_counts.iter_mut().zip(&h.counts) {
            *a += b;
        }
        pooled = Some(match pooled {
            Some(acc) => tape.add(acc, h.relaxed)?,
            None => h.relaxed,
        });
    }
    let relaxed = degree_kl(tape, pooled.expect("non-empty"), &pooled_target)?;
    if !hard {
        return Ok(relaxed);
    }
    tape.straight_through(relaxed, Tensor::scalar(smoothed_kl(&pooled_target, &pooled_counts)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeReduction {
    /// Divided by the number of scored pairs in the batch.
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeLossConfig {
    /// Weight of the degree term; 0 disables it.
    pub degree_weight: f64,
    pub temperature: f64,
    pub hard: bool,
    pub reduction: CeReduction,
}

impl Default for EdgeLossConfig {
    fn default() -> Self {
        Self {
            degree_weight: 1.0,
            temperature: 1.0,
            hard: true,
            reduction: CeReduction::Mean,
        }
    }
}

/// Randomness for one edge-loss evaluation, drawn up front.
#[derive(Clone, Debug)]
pub struct EdgeDraws {
    pub steps: Vec<usize>,
    pub e_t: Vec<Vec<u8>>,
    pub gumbel: Vec<Tensor>,
}

pub fn draw_edge_noise<R: Rng + ?Sized>(
    noise: &EdgeNoiseModel,
    graphs: &[SpatialGraph],
    rng: &mut R,
) -> Result<EdgeDraws> {
    let mut draws = EdgeDraws {
        steps: Vec::with_capacity(graphs.len()),
        e_t: Vec::with_capacity(graphs.len()),
        gumbel: Vec::with_capacity(graphs.len()),
    };
    for g in graphs {
        let t = rng.random_range(1..=noise.schedule().steps());
        draws.e_t.push(noise.forward_noise_edges(g.edges(), g.num_nodes(), t, rng)?);
        draws.gumbel.push(symmetric_gumbel(g.num_nodes(), noise.num_classes(), rng));
        draws.steps.push(t);
    }
    Ok(draws)
}

/// Cross-entropy of the clean classes summed over the upper-triangle pairs of one graph.
pub fn edge_ce_sum(tape: &mut Tape, logits: Var, e0: &[u8]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let n = s[0];
    if e0.len() != n * n {
        return Err(Error::shape("edge_ce", &s, &[e0.len()]));
    }
    let targets: Vec<usize> = e0.iter().map(|&v| v as usize).collect();
    let weights: Vec<f64> = (0..n * n).map(|k| if k / n < k % n { 1.0 } else { 0.0 }).collect();
    cross_entropy_logits(tape, logits, &targets, &weights)
}

fn ce_scale(graphs: &[SpatialGraph], reduction: CeReduction) -> f64 {
    match reduction {
        CeReduction::Sum => 1.0,
        CeReduction::Mean => {
            let p: usize = graphs.iter().map(|g| num_pairs(g.num_nodes())).sum();
            1.0 / p.max(1) as f64
        }
    }
}

/// CE loss for a single graph at a fixed step.
pub fn edge_ce_loss<M: EdgePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    params: &ParamStore,
    graph: &SpatialGraph,
    t: usize,
    noise: &EdgeNoiseModel,
    reduction: CeReduction,
    rng: &mut R,
) -> Result<f64> {
    noise.schedule().check_step(t)?;
    let e_t = noise.forward_noise_edges(graph.edges(), graph.num_nodes(), t, rng)?;
    let mut tape = Tape::new();
    let logits = model.predict_logits(&mut tape, params, &e_t, graph.coords(), t)?;
    let ce = edge_ce_sum(&mut tape, logits, graph.edges())?;
    Ok(tape.value(ce).item() * ce_scale(std::slice::from_ref(graph), reduction))
}

/// Total edge loss on a single tape. Mainly for gradient checking; training uses the
/// data-parallel [`edge_loss_with_draws`], which yields the same value and gradient.
pub fn edge_loss_tape<M: EdgePredictor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    params: &ParamStore,
    graphs: &[SpatialGraph],
    draws: &EdgeDraws,
    cfg: &EdgeLossConfig,
) -> Result<Var> {
    let mut logits = Vec::with_capacity(graphs.len());
    let mut ce_total: Option<Var> = None;
    for (b, g) in graphs.iter().enumerate() {
        let l = model.predict_logits(tape, params, &draws.e_t[b], g.coords(), draws.steps[b])?;
        let ce = edge_ce_sum(tape, l, g.edges())?;
        ce_total = Some(match ce_total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
        logits.push(l);
    }
    let ce_total = ce_total.ok_or_else(|| Error::invalid("empty edge batch"))?;
    let ce = tape.scale(ce_total, ce_scale(graphs, cfg.reduction));
    if cfg.degree_weight == 0.0 {
        return Ok(ce);
    }
    let targets: Vec<&[u8]> = graphs.iter().map(|g| g.edges()).collect();
    let deg = degree_loss(tape, &logits, &targets, &draws.gumbel, cfg.temperature, cfg.hard)?;
    let deg = tape.scale(deg, cfg.degree_weight);
    tape.add(ce, deg)
}

#[derive(Clone, Debug)]
pub struct EdgeLossOutput {
    pub loss: f64,
    pub ce: f64,
    pub degree: f64,
    pub grads: Vec<Tensor>,
}

impl From<EdgeLossOutput> for LossAndGrad {
    fn from(o: EdgeLossOutput) -> Self {
        LossAndGrad {
            loss: o.loss,
            grads: o.grads,
        }
    }
}

/// Edge loss with one tape per graph.
///
/// The pooled degree KL couples the graphs only through the summed histogram, so the
/// forward pass runs per graph, the KL and its gradient w.r.t. the pooled histogram are
/// evaluated on a small separate tape, and each graph tape is then reversed with that
/// gradient as the seed of its own histogram.
pub fn edge_loss_with_draws<M: EdgePredictor + ?Sized>(
    model: &M,
    params: &ParamStore,
    graphs: &[SpatialGraph],
    draws: &EdgeDraws,
    cfg: &EdgeLossConfig,
) -> Result<EdgeLossOutput> {
    if graphs.is_empty() {
        return Err(Error::invalid("empty edge batch"));
    }
    let use_degree = cfg.degree_weight != 0.0;
    let scale = ce_scale(graphs, cfg.reduction);
    let mut tapes = par::try_map_range(graphs.len(), |b| -> Result<(Tape, Var, Option<DegreeSample>)> {
        let g = &graphs[b];
        let mut tape = Tape::new();
        let l = model.predict_logits(&mut tape, params, &draws.e_t[b], g.coords(), draws.steps[b])?;
        let ce = edge_ce_sum(&mut tape, l, g.edges())?;
        let h = if use_degree {
            Some(predicted_degree_histogram(&mut tape, l, &draws.gumbel[b], cfg.temperature)?)
        } else {
            None
        };
        Ok((tape, ce, h))
    })?;

    let ce: f64 = tapes.iter().map(|(t, ce, _)| t.value(*ce).item()).sum::<f64>() * scale;
    let (degree, hist_seed) = if use_degree {
        let mut relaxed = vec![0.0; DEGREE_BINS];
        let mut counts = vec![0.0; DEGREE_BINS];
        let mut target = vec![0.0; DEGREE_BINS];
        for ((tape, _, h), g) in tapes.iter().zip(graphs) {
            let h = h.as_ref().expect("hist");
            for (a, b) in relaxed.iter_mut().zip(tape.value(h.relaxed).data()) {
                *a += b;
            }
            for (a, b) in counts.iter_mut().zip(&h.counts) {
                *a += b;
            }
            for (a, b) in target.iter_mut().zip(degree_histogram(g.edges(), g.num_nodes())) {
                *a += b;
            }
        }
        let mut small = Tape::new();
        let hv = small.constant(&[DEGREE_BINS], relaxed)?;
        let kl = degree_kl(&mut small, hv, &target)?;
        let value = if cfg.hard { smoothed_kl(&target, &counts) } else { small.value(kl).item() };
        let g = small.backward(kl)?.get_or_zero(hv);
        let seed = Tensor::from_fn(&[DEGREE_BINS], |k| g.data()[k] * cfg.degree_weight);
        (value, Some(seed))
    } else {
        (0.0, None)
    };

    let parts = par::try_map_slice_mut(&mut tapes, |(tape, ce_var, h)| -> Result<Vec<Tensor>> {
        let mut seeds = vec![(*ce_var, Tensor::scalar(scale))];
        if let (Some(h), Some(seed)) = (h, &hist_seed) {
            seeds.push((h.relaxed, seed.clone()));
        }
        let grads = tape.backward_with_seeds(&seeds)?;
        Ok(tape.param_grads(&grads, params))
    })?;
    let grads = sum_grads(params, parts);
    Ok(EdgeLossOutput {
        loss: ce + cfg.degree_weight * degree,
        ce,
        degree,
        grads,
    })
}

pub fn edge_loss<M: EdgePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    params: &ParamStore,
    graphs: &[SpatialGraph],
    noise: &EdgeNoiseModel,
    cfg: &EdgeLossConfig,
    rng: &mut R,
) -> Result<EdgeLossOutput> {
    let draws = draw_edge_noise(noise, graphs, rng)?;
    edge_loss_with_draws(model, params, graphs, &draws, cfg)
}
