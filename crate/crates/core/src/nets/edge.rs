use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{embedding_leaf, LayerNorm, Linear, Mlp, SelfAttention};
use crate::edgediff::EdgePredictor;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeNetConfig {
    pub num_classes: usize,
    pub node_width: usize,
    pub edge_width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub time_dim: usize,
}

impl EdgeNetConfig {
    pub fn paper(num_classes: usize) -> Self {
        Self {
            num_classes,
            node_width: 128,
            edge_width: 64,
            blocks: 8,
            heads: 8,
            time_dim: 128,
        }
    }

    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            node_width: 64,
            edge_width: 32,
            blocks: 4,
            heads: 4,
            time_dim: 64,
        }
    }

    /// Width of the fixed per-pair input: class one-hot, distance, |Δx|, |Δy|, |Δz|,
    /// two neighbour-rank features and a locally rescaled distance.
    pub fn pair_input_width(&self) -> usize {
        self.num_classes + 7
    }
}

#[derive(Clone, Debug)]
struct EdgeBlock {
    film_edges: Linear,
    film_time: Linear,
    norm_attn: LayerNorm,
    attn: SelfAttention,
    attn_bias: Linear,
    norm_ffn: LayerNorm,
    ffn: Mlp,
    pair_src: Linear,
    pair_dst: Linear,
    pair_self: Linear,
    pair_out: Linear,
}

/// Graph transformer over node features with pair-feature conditioning.
///
/// Node features are lifted from raw coordinates, so the model is sensitive to
/// global orientation. Pair features come from the noisy edge classes and
/// pairwise geometry. Each block modulates node features with FiLM computed from
/// mean incident pair features and the timestep, applies self-attention whose
/// scores carry a per-head bias projected from the pair features, and finally
/// updates the pair features from both endpoint states. The output head scores every ordered pair from both endpoint features and the pair
/// features, then symmetrises.
#[derive(Clone, Debug)]
pub struct EdgeDenoiser {
    config: EdgeNetConfig,
    time_mlp: Mlp,
    node_in: Linear,
    pair_in: Mlp,
    blocks: Vec<EdgeBlock>,
    final_norm: LayerNorm,
    head_src: Linear,
    head_dst: Linear,
    head_pair: Linear,
    head_out: Linear,
}

impl EdgeDenoiser {
    pub fn new<R: Rng + ?Sized>(config: EdgeNetConfig, rng: &mut R) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let (dn, de) = (config.node_width, config.edge_width);
        let time_mlp = Mlp::new(&mut store, "edge_net.time_mlp", [config.time_dim, dn, dn], rng);
        let node_in = Linear::new(&mut store, "edge_net.node_in", "", 3, dn, true, rng);
        let pair_in = Mlp::new(&mut store, "edge_net.pair_in", [config.pair_input_width(), de, de], rng);
        let blocks = (0..config.blocks)
            .map(|b| {
                let name = format!("edge_net.block{b}");
                EdgeBlock {
                    film_edges: Linear::new(&mut store, &format!("{name}.film"), "_edges", de, 2 * dn, true, rng),
                    film_time: Linear::new(&mut store, &format!("{name}.film"), "_time", dn, 2 * dn, false, rng),
                    norm_attn: LayerNorm::new(&mut store, &format!("{name}.norm_attn"), dn),
                    attn: SelfAttention::new(&mut store, &format!("{name}.attn"), dn, config.heads, rng),
                    attn_bias: Linear::new(&mut store, &format!("{name}.attn_bias"), "", de, config.heads, false, rng),
                    norm_ffn: LayerNorm::new(&mut store, &format!("{name}.norm_ffn"), dn),
                    ffn: Mlp::new(&mut store, &format!("{name}.ffn"), [dn, 2 * dn, dn], rng),
                    pair_src: Linear::new(&mut store, &format!("{name}.pair"), "_src", dn, de, true, rng),
                    pair_dst: Linear::new(&mut store, &format!("{name}.pair"), "_dst", dn, de, false, rng),
                    pair_self: Linear::new(&mut store, &format!("{name}.pair"), "_self", de, de, false, rng),
                    pair_out: Linear::new(&mut store, &format!("{name}.pair"), "_out", de, de, true, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut store, "edge_net.final_norm", dn);
        let head_src = Linear::new(&mut store, "edge_net.head", "_src", dn, dn, true, rng);
        let head_dst = Linear::new(&mut store, "edge_net.head", "_dst", dn, dn, false, rng);
        let head_pair = Linear::new(&mut store, "edge_net.head", "_pair", de, dn, false, rng);
        let head_out = Linear::new(&mut store, "edge_net.head", "_out", dn, config.num_classes, true, rng);
        (
            Self {
                config,
                time_mlp,
                node_in,
                pair_in,
                blocks,
                final_norm,
                head_src,
                head_dst,
                head_pair,
                head_out,
            },
            store,
        )
    }

    pub fn config(&self) -> &EdgeNetConfig {
        &self.config
    }

    fn pair_inputs(&self, e_t: &[u8], coords: &[[f64; 3]]) -> Result<Tensor> {
        let n = coords.len();
        let c = self.config.num_classes;
        let w = self.config.pair_input_width();
        let dist = |i: usize, j: usize| -> f64 {
            let d: [f64; 3] = std::array::from_fn(|a| coords[i][a] - coords[j][a]);
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        };
        // rank[i * n + j]: position of j among i's neighbours by distance, 0 = nearest
        let mut rank = vec![0usize; n * n];
        let mut nearest = vec![1.0; n];
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)).then(a.cmp(&b)));
            for (r, &j) in order.iter().enumerate() {
                rank[i * n + j] = r;
            }
            if let Some(&j) = order.first() {
                nearest[i] = dist(i, j).max(1e-6);
            }
        }
        let mut data = vec![0.0; n * n * w];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let o = (i * n + j) * w;
                let label = e_t[i * n + j] as usize;
                if label >= c {
                    return Err(Error::invalid(format!("edge label {label} out of range")));
                }
                data[o + label] = 1.0;
                let d: [f64; 3] = std::array::from_fn(|a| (coords[i][a] - coords[j][a]).abs());
                let r = dist(i, j);
                let (r_lo, r_hi) = {
                    let (a, b) = (rank[i * n + j], rank[j * n + i]);
                    (a.min(b), a.max(b))
                };
                data[o + c] = r;
                data[o + c + 1] = d[0];
                data[o + c + 2] = d[1];
                data[o + c + 3] = d[2];
                data[o + c + 4] = 1.0 / (1.0 + r_lo as f64);
                data[o + c + 5] = 1.0 / (1.0 + r_hi as f64);
                data[o + c + 6] = (r / (nearest[i] * nearest[j]).sqrt()).ln();
            }
        }
        Tensor::new(&[n, n, w], data)
    }

    /// Symmetric per-pair class logits `[n, n, c]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e_t: &[u8],
        coords: &[[f64; 3]],
        t: usize,
    ) -> Result<Var> {
        let n = coords.len();
        if e_t.len() != n * n {
            return Err(Error::shape("edge_denoiser_forward", &[e_t.len()], &[n, n]));
        }
        let (dn, de) = (self.config.node_width, self.config.edge_width);

        let temb = embedding_leaf(tape, t, self.config.time_dim)?;
        let tv = self.time_mlp.forward(tape, store, temb)?;

        let pin = tape.leaf(self.pair_inputs(e_t, coords)?);
        let pair = self.pair_in.forward(tape, store, pin)?;
        let offdiag = Tensor::from_fn(&[n, n, de], |k| {
            let p = k / de;
            if p / n == p % n { 0.0 } else { 1.0 }
        });
        let offdiag = tape.leaf(offdiag);
        let mut pair = tape.mul(pair, offdiag)?;
        let mean_scale = 1.0 / (n.max(2) - 1) as f64;

        let xv = tape.constant(&[n, 3], coords.iter().flatten().copied().collect())?;
        let mut h = self.node_in.forward(tape, store, xv)?;

        for block in &self.blocks {
            let agg = tape.sum_axis(pair, 1)?;
            let agg = tape.scale(agg, mean_scale);
            let fe = block.film_edges.forward(tape, store, agg)?;
            let ft = block.film_time.forward(tape, store, tv)?;
            let ft = tape.reshape(ft, &[2 * dn])?;
            let film = tape.add_broadcast(fe, ft)?;
            let gamma = tape.slice_last(film, 0, dn)?;
            let beta = tape.slice_last(film, dn, dn)?;
            let scaled = tape.mul(h, gamma)?;
            let h1 = tape.add(h, scaled)?;
            h = tape.add(h1, beta)?;

            let z = block.norm_attn.forward(tape, store, h)?;
            let bias = block.attn_bias.forward(tape, store, pair)?;
            let bias = tape.permute3(bias, [2, 0, 1])?;
            let att = block.attn.forward(tape, store, z, Some(bias), None)?;
            h = tape.add(h, att)?;

            let z = block.norm_ffn.forward(tape, store, h)?;
            let f = block.ffn.forward(tape, store, z)?;
            h = tape.add(h, f)?;

            let a = block.pair_src.forward(tape, store, h)?;
            let b = block.pair_dst.forward(tape, store, h)?;
            let ab = tape.outer_add(a, b)?;
            let pp = block.pair_self.forward(tape, store, pair)?;
            let upd = tape.add(ab, pp)?;
            let upd = tape.gelu(upd);
            let upd = block.pair_out.forward(tape, store, upd)?;
            let upd = tape.mul(upd, offdiag)?;
            pair = tape.add(pair, upd)?;
        }

        let z = self.final_norm.forward(tape, store, h)?;
        let u = self.head_src.forward(tape, store, z)?;
        let v = self.head_dst.forward(tape, store, z)?;
        let uv = tape.outer_add(u, v)?;
        let p = self.head_pair.forward(tape, store, pair)?;
        let hidden = tape.add(uv, p)?;
        let hidden = tape.gelu(hidden);
        let logits = self.head_out.forward(tape, store, hidden)?;
        let mirrored = tape.permute3(logits, [1, 0, 2])?;
        let sym = tape.add(logits, mirrored)?;
        Ok(tape.scale(sym, 0.5))
    }
}

impl EdgePredictor for EdgeDenoiser {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict_logits(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        e_t: &[u8],
        coords: &[[f64; 3]],
        t: usize,
    ) -> Result<Var> {
        self.forward(tape, params, e_t, coords, t)
    }
}
