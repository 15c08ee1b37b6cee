//! The two denoising networks and the layer helpers they share.
//!
//! Parameter names follow `<net>.<block>.<layer>.<w|b>` so checkpoints diff cleanly,
//! e.g. `node_net.block0.coord_mlp.w0`.

mod edge;
mod node;

pub use edge::{EdgeDenoiser, EdgeNetConfig};
pub use node::{NodeDenoiser, NodeNetConfig};

use rand::Rng;

use crate::error::Result;
use crate::tensor::{scaled_dot_attention, ParamId, ParamStore, Tape, Tensor, Var};

/// Sinusoidal embedding of an integer timestep; frequencies are geometric from
/// 1 down to 1e-4, `dim` must be even.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half > 1 {
            (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let a = t as f64 * freq;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        suffix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_weight(format!("{name}.w{suffix}"), fan_in, fan_out, rng);
        let b = bias.then(|| store.add_const(format!("{name}.b{suffix}"), &[fan_out], 0.0));
        Self { w, b }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    l0: Linear,
    l1: Linear,
}

impl Mlp {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Self {
            l0: Linear::new(store, name, "0", dims[0], dims[1], true, rng),
            l1: Linear::new(store, name, "1", dims[1], dims[2], true, rng),
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l0.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.l1.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[width], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[width], 0.0),
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head self-attention over the rows of an `[n, width]` input.
#[derive(Clone, Debug)]
pub(crate) struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    width: usize,
}

impl SelfAttention {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, name, "q", width, width, false, rng),
            k: Linear::new(store, name, "k", width, width, false, rng),
            v: Linear::new(store, name, "v", width, width, false, rng),
            o: Linear::new(store, name, "o", width, width, true, rng),
            heads,
            width,
        }
    }

    fn split(&self, tape: &mut Tape, x: Var, n: usize) -> Result<Var> {
        let x = tape.reshape(x, &[n, self.heads, self.width / self.heads])?;
        tape.permute3(x, [1, 0, 2])
    }

    /// `bias` is `[heads, n, n]`; masked keys are excluded for every query.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        bias: Option<Var>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let n = tape.shape(x)[0];
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let (q, k, v) = (self.split(tape, q, n)?, self.split(tape, k, n)?, self.split(tape, v, n)?);
        let a = scaled_dot_attention(tape, q, k, v, bias, key_mask)?;
        let a = tape.permute3(a, [1, 0, 2])?;
        let a = tape.reshape(a, &[n, self.width])?;
        self.o.forward(tape, store, a)
    }
}

pub(crate) fn embedding_leaf(tape: &mut Tape, t: usize, dim: usize) -> Result<Var> {
    Ok(tape.leaf(Tensor::new(&[1, dim], timestep_embedding(t, dim))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_embeddings_are_distinct() {
        let dim = 64;
        let mut keys: Vec<Vec<u64>> = (1..=10_000)
            .map(|t| timestep_embedding(t, dim).iter().map(|x| x.to_bits()).collect())
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 10_000);
    }
}
