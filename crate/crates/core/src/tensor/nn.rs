use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Additive score for masked attention keys. `exp` of it underflows to exactly 0.
pub const MASK_NEG: f64 = -1e30;

/// Multi-head scaled dot-product attention.
///
/// `q`, `k`, `v` are `[heads, n, d]`; `bias` (optional) is `[heads, n, n]` and is
/// added to the scores; `key_mask[j] == false` removes key `j` for every query.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let sq = tape.shape(q).to_vec();
    if sq.len() != 3 || tape.shape(k) != sq.as_slice() || tape.shape(v) != sq.as_slice() {
        return Err(Error::shape("scaled_dot_attention", &sq, tape.shape(k)));
    }
    let (n, d) = (sq[1], sq[2]);
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        scores = tape.add(scores, b)?;
    }
    if let Some(mask) = key_mask {
        if mask.len() != n {
            return Err(Error::shape("scaled_dot_attention mask", &sq, &[mask.len()]));
        }
        let m: Vec<f64> = (0..n * n)
            .map(|idx| if mask[idx % n] { 0.0 } else { MASK_NEG })
            .collect();
        let mv = tape.constant(&[n, n], m)?;
        scores = tape.add_broadcast(scores, mv)?;
    }
    let attn = tape.softmax(scores);
    tape.matmul(attn, v)
}

/// Standard Gumbel noise `-ln(-ln u)` of the given shape.
pub fn gumbel_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
        -(-u.ln()).ln()
    })
}

impl Tape {
    /// Gumbel-softmax relaxation over the last axis with caller-supplied noise.
    ///
    /// With `hard`, the forward value is the one-hot argmax of the perturbed logits and
    /// the gradient is that of the relaxed sample (straight-through).
    pub fn gumbel_softmax_with_noise(
        &mut self,
        logits: Var,
        noise: &Tensor,
        temperature: f64,
        hard: bool,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
        }
        if !self.value(logits).is_finite() {
            return Err(Error::Numeric("gumbel_softmax: non-finite logits".into()));
        }
        if noise.shape() != self.shape(logits) {
            return Err(Error::shape("gumbel_softmax", self.shape(logits), noise.shape()));
        }
        let g = self.leaf(noise.clone());
        let z = self.add(logits, g)?;
        let z = self.scale(z, 1.0 / temperature);
        let soft = self.softmax(z);
        if !hard {
            return Ok(soft);
        }
        let sv = self.value(soft);
        let w = sv.last_dim();
        let mut hard_t = Tensor::zeros(sv.shape());
        for (src, dst) in sv.data().chunks(w).zip(hard_t.data_mut().chunks_mut(w)) {
            let mut best = 0;
            for c in 1..w {
                if src[c] > src[best] {
                    best = c;
                }
            }
            dst[best] = 1.0;
        }
        self.straight_through(soft, hard_t)
    }

    pub fn gumbel_softmax<R: Rng + ?Sized>(
        &mut self,
        logits: Var,
        temperature: f64,
        hard: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let noise = gumbel_noise(self.shape(logits), rng);
        self.gumbel_softmax_with_noise(logits, &noise, temperature, hard)
    }

    /// `x W + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }
}

/// Weighted cross-entropy `-Σ_r weight_r · log softmax(logits_r)[target_r]` over rows
/// of the last axis.
pub fn cross_entropy_logits(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    weights: &[f64],
) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let c = *s.last().ok_or_else(|| Error::shape("cross_entropy", &s, &[]))?;
    let rows = tape.value(logits).len() / c;
    if targets.len() != rows || weights.len() != rows {
        return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
    }
    let mut pick = vec![0.0; rows * c];
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if t >= c {
            return Err(Error::invalid(format!("target class {t} out of range for {c} classes")));
        }
        pick[r * c + t] = -w;
    }
    let lp = tape.log_softmax(logits);
    let pv = tape.constant(&s, pick)?;
    let prod = tape.mul(lp, pv)?;
    Ok(tape.sum(prod))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn hard_gumbel_is_one_hot() {
        let mut r = rng::stream(1, &[]);
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_fn(&[6, 4], |i| (i as f64 * 0.37).sin()));
        let y = tape.gumbel_softmax(l, 1.0, true, &mut r).unwrap();
        for row in tape.value(y).data().chunks(4) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
        }
    }

    #[test]
    fn gumbel_rejects_bad_inputs() {
        let mut r = rng::stream(1, &[]);
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(&[2], vec![f64::NAN, 0.0]).unwrap());
        assert!(tape.gumbel_softmax(l, 1.0, false, &mut r).is_err());
        let l = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.gumbel_softmax(l, 0.0, false, &mut r).is_err());
        assert!(tape.gumbel_softmax(l, -1.0, false, &mut r).is_err());
    }

    #[test]
    fn uniform_cross_entropy_is_ln_c() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[2, 5]));
        let ce = cross_entropy_logits(&mut tape, l, &[0, 3], &[0.5, 0.5]).unwrap();
        assert!((tape.value(ce).item() - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_fn(&[1, 3, 2], |i| i as f64 * 0.1));
        let k = tape.leaf(Tensor::from_fn(&[1, 3, 2], |i| 1.0 - i as f64 * 0.2));
        let v1 = Tensor::from_fn(&[1, 3, 2], |i| i as f64);
        let mut v2 = v1.clone();
        v2.data_mut()[4] = 1e6;
        v2.data_mut()[5] = -3.0;
        let mask = [true, true, false];
        let va = tape.leaf(v1);
        let vb = tape.leaf(v2);
        let a = scaled_dot_attention(&mut tape, q, k, va, None, Some(&mask)).unwrap();
        let b = scaled_dot_attention(&mut tape, q, k, vb, None, Some(&mask)).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }
}
