use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{embedding_leaf, LayerNorm, Mlp, SelfAttention};
use crate::error::{Error, Result};
use crate::nodediff::NoisePredictor;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeNetConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub time_dim: usize,
}

impl NodeNetConfig {
    pub fn paper() -> Self {
        Self {
            width: 256,
            blocks: 2,
            heads: 4,
            time_dim: 256,
        }
    }

    pub fn desk() -> Self {
        Self {
            width: 64,
            blocks: 2,
            heads: 4,
            time_dim: 64,
        }
    }
}

#[derive(Clone, Debug)]
struct NodeBlock {
    coord_mlp: Mlp,
    time_mlp: Mlp,
    norm: LayerNorm,
    attn: SelfAttention,
}

/// Noise predictor for padded node sets: per block a coordinate MLP and a
/// timestep MLP are summed, then refined by masked multi-head self-attention.
#[derive(Clone, Debug)]
pub struct NodeDenoiser {
    config: NodeNetConfig,
    blocks: Vec<NodeBlock>,
    final_norm: LayerNorm,
    head: Mlp,
}

impl NodeDenoiser {
    /// Builds the layer layout and a freshly initialised parameter store.
    pub fn new<R: Rng + ?Sized>(config: NodeNetConfig, rng: &mut R) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let w = config.width;
        let blocks = (0..config.blocks)
            .map(|b| {
                let name = format!("node_net.block{b}");
                let in_dim = if b == 0 { 3 } else { w };
                NodeBlock {
                    coord_mlp: Mlp::new(&mut store, &format!("{name}.coord_mlp"), [in_dim, w, w], rng),
                    time_mlp: Mlp::new(
                        &mut store,
                        &format!("{name}.time_mlp"),
                        [config.time_dim, w, w],
                        rng,
                    ),
                    norm: LayerNorm::new(&mut store, &format!("{name}.norm"), w),
                    attn: SelfAttention::new(&mut store, &format!("{name}.attn"), w, config.heads, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut store, "node_net.final_norm", w);
        let head = Mlp::new(&mut store, "node_net.head", [w, w, 3], rng);
        (
            Self {
                config,
                blocks,
                final_norm,
                head,
            },
            store,
        )
    }

    pub fn config(&self) -> &NodeNetConfig {
        &self.config
    }

    /// `x_t: [n, 3]` → predicted noise `[n, 3]`, zero on masked rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_t: Var,
        mask: &[bool],
        t: usize,
    ) -> Result<Var> {
        let s = tape.shape(x_t).to_vec();
        if s.len() != 2 || s[1] != 3 || s[0] != mask.len() {
            return Err(Error::shape("node_denoiser_forward", &s, &[mask.len(), 3]));
        }
        let n = s[0];
        let temb = embedding_leaf(tape, t, self.config.time_dim)?;
        let mut h = x_t;
        for (b, block) in self.blocks.iter().enumerate() {
            let mut a = block.coord_mlp.forward(tape, store, h)?;
            if b > 0 {
                a = tape.add(a, h)?;
            }
            let tv = block.time_mlp.forward(tape, store, temb)?;
            let tv = tape.reshape(tv, &[self.config.width])?;
            let summed = tape.add_broadcast(a, tv)?;
            let z = block.norm.forward(tape, store, summed)?;
            let att = block.attn.forward(tape, store, z, None, Some(mask))?;
            h = tape.add(summed, att)?;
        }
        let z = self.final_norm.forward(tape, store, h)?;
        let out = self.head.forward(tape, store, z)?;
        let m: Vec<f64> = (0..n * 3).map(|i| if mask[i / 3] { 1.0 } else { 0.0 }).collect();
        let mv = tape.constant(&[n, 3], m)?;
        tape.mul(out, mv)
    }
}

impl NoisePredictor for NodeDenoiser {
    fn predict_noise(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x_t: Var,
        mask: &[bool],
        t: usize,
    ) -> Result<Var> {
        self.forward(tape, params, x_t, mask, t)
    }
}
