//! Gaussian diffusion over node coordinates: forward noising, the noise-prediction
//! loss and ancestral sampling.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::par;
use crate::schedule::NoiseSchedule;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Anything that maps noisy coordinates `[n, 3]` at step `t` to a noise estimate.
pub trait NoisePredictor: Sync {
    fn predict_noise(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x_t: Var,
        mask: &[bool],
        t: usize,
    ) -> Result<Var>;
}

/// Coordinate sets padded to a common length. Padded rows are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeBatch {
    max_n: usize,
    coords: Vec<f64>,
    mask: Vec<bool>,
}

impl NodeBatch {
    pub fn from_sets(sets: &[Vec<[f64; 3]>]) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::invalid("empty node batch"));
        }
        let max_n = sets.iter().map(Vec::len).max().unwrap_or(0);
        if max_n == 0 {
            return Err(Error::invalid("node batch without nodes"));
        }
        let mut coords = vec![0.0; sets.len() * max_n * 3];
        let mut mask = vec![false; sets.len() * max_n];
        for (b, set) in sets.iter().enumerate() {
            for (i, p) in set.iter().enumerate() {
                coords[(b * max_n + i) * 3..][..3].copy_from_slice(p);
                mask[b * max_n + i] = true;
            }
        }
        Ok(Self { max_n, coords, mask })
    }

    pub fn from_graphs(graphs: &[SpatialGraph]) -> Result<Self> {
        let sets: Vec<Vec<[f64; 3]>> = graphs.iter().map(|g| g.coords().to_vec()).collect();
        Self::from_sets(&sets)
    }

    pub fn len(&self) -> usize {
        self.mask.len() / self.max_n
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn max_n(&self) -> usize {
        self.max_n
    }

    /// Flat `[batch, max_n, 3]` coordinates.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn element(&self, b: usize) -> (&[f64], &[bool]) {
        let n = self.max_n;
        (&self.coords[b * n * 3..(b + 1) * n * 3], &self.mask[b * n..(b + 1) * n])
    }

    pub fn num_active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Overwrites padded coordinates; only useful for testing the masking contract.
    pub fn with_padding_values(&self, v: f64) -> Self {
        let mut out = self.clone();
        for (k, x) in out.coords.iter_mut().enumerate() {
            if !self.mask[k / 3] {
                *x = v;
            }
        }
        out
    }
}

/// Timestep and Gaussian noise per batch element, drawn before any model call so that
/// parallel evaluation sees the same randomness as a sequential one.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeDraws {
    pub steps: Vec<usize>,
    pub eps: Vec<f64>,
}

pub fn standard_normal<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn draw_node_noise<R: Rng + ?Sized>(
    batch: &NodeBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> NodeDraws {
    let steps = (0..batch.len()).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let mut eps = standard_normal(batch.coords.len(), rng);
    for (k, e) in eps.iter_mut().enumerate() {
        if !batch.mask[k / 3] {
            *e = 0.0;
        }
    }
    NodeDraws { steps, eps }
}

/// `x_t = √ᾱ_t x0 + √(1−ᾱ_t) ε` per element; `t = 0` is the identity. Padded rows stay 0.
pub fn forward_noise_nodes(
    batch: &NodeBatch,
    steps: &[usize],
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if steps.len() != batch.len() || eps.len() != batch.coords.len() {
        return Err(Error::shape("forward_noise_nodes", &[batch.len(), batch.max_n, 3], &[steps.len(), eps.len()]));
    }
    let per = batch.max_n * 3;
    let mut out = vec![0.0; batch.coords.len()];
    for (b, &t) in steps.iter().enumerate() {
        if t > schedule.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [0, {}]", schedule.steps())));
        }
        let ab = schedule.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for k in b * per..(b + 1) * per {
            if batch.mask[k / 3] {
                out[k] = sa * batch.coords[k] + sn * eps[k];
            }
        }
    }
    Ok(out)
}

/// Sum of squared errors for one element, recorded on `tape`.
fn element_sse<M: NoisePredictor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    params: &ParamStore,
    x_t: &[f64],
    eps: &[f64],
    mask: &[bool],
    t: usize,
) -> Result<Var> {
    let n = mask.len();
    let xv = tape.constant(&[n, 3], x_t.to_vec())?;
    let pred = model.predict_noise(tape, params, xv, mask, t)?;
    let target = tape.constant(&[n, 3], eps.to_vec())?;
    let diff = tape.sub(pred, target)?;
    let m: Vec<f64> = (0..n * 3).map(|k| if mask[k / 3] { 1.0 } else { 0.0 }).collect();
    let mv = tape.constant(&[n, 3], m)?;
    let diff = tape.mul(diff, mv)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// Mean squared noise-prediction error over all unmasked coordinates, built on one tape.
pub fn node_loss_tape<M: NoisePredictor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    params: &ParamStore,
    batch: &NodeBatch,
    draws: &NodeDraws,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let x_t = forward_noise_nodes(batch, &draws.steps, &draws.eps, schedule)?;
    let per = batch.max_n * 3;
    let mut total: Option<Var> = None;
    for b in 0..batch.len() {
        let (_, mask) = batch.element(b);
        let r = b * per..(b + 1) * per;
        let sse = element_sse(tape, model, params, &x_t[r.clone()], &draws.eps[r], mask, draws.steps[b])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, sse)?,
            None => sse,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty node batch"))?;
    Ok(tape.scale(total, 1.0 / (3 * batch.num_active()) as f64))
}

/// Loss value and parameter gradients aligned to the parameter store.
#[derive(Clone, Debug)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

pub(crate) fn sum_grads(store: &ParamStore, parts: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let mut out = store.zeros_like();
    for part in parts {
        for (o, g) in out.iter_mut().zip(part) {
            for (a, b) in o.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    out
}

/// Noise-prediction loss with one tape per batch element; elements run in parallel
/// and their gradients are summed in batch order.
pub fn node_loss_with_draws<M: NoisePredictor + ?Sized>(
    model: &M,
    params: &ParamStore,
    batch: &NodeBatch,
    draws: &NodeDraws,
    schedule: &NoiseSchedule,
) -> Result<LossAndGrad> {
    let x_t = forward_noise_nodes(batch, &draws.steps, &draws.eps, schedule)?;
    let per = batch.max_n * 3;
    let norm = 1.0 / (3 * batch.num_active()) as f64;
    let parts = par::try_map_range(batch.len(), |b| -> Result<(f64, Vec<Tensor>)> {
        let (_, mask) = batch.element(b);
        let r = b * per..(b + 1) * per;
        let mut tape = Tape::new();
        let sse = element_sse(&mut tape, model, params, &x_t[r.clone()], &draws.eps[r], mask, draws.steps[b])?;
        let value = tape.value(sse).item();
        let grads = tape.backward_with_seeds(&[(sse, Tensor::scalar(norm))])?;
        Ok((value, tape.param_grads(&grads, params)))
    })?;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() * norm;
    let grads = sum_grads(params, parts.into_iter().map(|p| p.1).collect());
    Ok(LossAndGrad { loss, grads })
}

pub fn node_loss<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    params: &ParamStore,
    batch: &NodeBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossAndGrad> {
    let draws = draw_node_noise(batch, schedule, rng);
    node_loss_with_draws(model, params, batch, &draws, schedule)
}

/// One reverse step: `(x − (1−α)/√(1−ᾱ) ε̂)/√α + √(1−α) z`, with `z` ignored at `t = 1`.
pub fn reverse_step(x: &[f64], eps_hat: &[f64], z: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let coef = (1.0 - a) / (1.0 - ab).sqrt();
    let sigma = if t > 1 { (1.0 - a).sqrt() } else { 0.0 };
    x.iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((&x, &e), &z)| (x - coef * e) / a.sqrt() + sigma * z)
        .collect()
}

/// Ancestral sampling from `X^T ~ N(0, I)` down to `X^0`.
pub fn sample_nodes<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    params: &ParamStore,
    n: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>> {
    if n == 0 {
        return Err(Error::invalid("n ≥ 1 violated"));
    }
    let mask = vec![true; n];
    let mut x = standard_normal(n * 3, rng);
    for t in (1..=schedule.steps()).rev() {
        let mut tape = Tape::new();
        let xv = tape.constant(&[n, 3], x.clone())?;
        let pred = model.predict_noise(&mut tape, params, xv, &mask, t)?;
        let z = if t > 1 { standard_normal(n * 3, rng) } else { vec![0.0; n * 3] };
        x = reverse_step(&x, tape.value(pred).data(), &z, t, schedule);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite coordinates at step {t}")));
        }
    }
    Ok(x.chunks(3).map(|p| [p[0], p[1], p[2]]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict_noise(&self, tape: &mut Tape, _: &ParamStore, x_t: Var, _: &[bool], _: usize) -> Result<Var> {
            Ok(tape.scale(x_t, 0.0))
        }
    }

    fn batch() -> NodeBatch {
        NodeBatch::from_sets(&[
            vec![[0.1, 0.2, 0.3], [-0.5, 0.4, 0.0]],
            vec![[0.9, -0.9, 0.2], [0.0, 0.0, 1.0], [0.3, 0.3, 0.3]],
        ])
        .unwrap()
    }

    #[test]
    fn padding_is_zero() {
        let b = batch();
        assert_eq!(b.max_n(), 3);
        assert_eq!(b.mask(), &[true, true, false, true, true, true]);
        assert!(b.coords()[6..9].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_step_is_identity_and_zero_noise_scales() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let b = batch();
        let eps: Vec<f64> = (0..b.coords().len()).map(|k| k as f64 * 0.1).collect();
        assert_eq!(forward_noise_nodes(&b, &[0, 0], &eps, &s).unwrap(), b.coords());
        let zero = vec![0.0; eps.len()];
        let x = forward_noise_nodes(&b, &[10, 10], &zero, &s).unwrap();
        let k = s.alpha_bar(10).sqrt();
        for (a, c) in x.iter().zip(b.coords()) {
            assert_eq!(*a, k * c);
        }
        assert!(forward_noise_nodes(&b, &[51, 1], &zero, &s).is_err());
    }

    #[test]
    fn padded_rows_stay_zero() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let b = batch();
        let d = draw_node_noise(&b, &s, &mut stream(1, &[]));
        let x = forward_noise_nodes(&b, &d.steps, &d.eps, &s).unwrap();
        assert!(x[6..9].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_predictor_loss_is_mean_eps_squared() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let b = batch();
        let d = draw_node_noise(&b, &s, &mut stream(2, &[]));
        let out = node_loss_with_draws(&Zero, &ParamStore::new(), &b, &d, &s).unwrap();
        let expect = d.eps.iter().map(|e| e * e).sum::<f64>() / 15.0;
        assert!((out.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn single_step_sampling_has_no_noise() {
        let s = NoiseSchedule::cosine(1).unwrap();
        let a = sample_nodes(&Zero, &ParamStore::new(), 4, &s, &mut stream(3, &[])).unwrap();
        let b = sample_nodes(&Zero, &ParamStore::new(), 4, &s, &mut stream(3, &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }
}
