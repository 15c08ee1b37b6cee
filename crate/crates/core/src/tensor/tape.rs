use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Transpose(Var),
    Permute3(Var, [usize; 3]),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Recip(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    StraightThrough(Var),
    OuterAdd(Var, Var),
    CountHistogram(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations so gradients can be propagated in reverse order.
///
/// Node ids are assigned in creation order, which is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    backward_calls: usize,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when `v` did not influence the output.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub(crate) const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c = alpha * a·b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering the strided m×k, k×n and m×n extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of backward rules run by the most recent backward pass.
    pub fn backward_calls(&self) -> usize {
        self.backward_calls
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Records a parameter as a leaf and remembers it for [`param_grads`](Self::param_grads).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.get(id).clone());
        self.params.push((v, id));
        v
    }

    /// Gradients of every parameter recorded via [`param`](Self::param), aligned to `store`.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        let mut out = store.zeros_like();
        for &(v, id) in &self.params {
            if let Some(g) = grads.raw(v) {
                for (o, x) in out[id.0].data_mut().iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
        out
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| f(a)).collect()).expect("shape");
        self.push(out, op)
    }

    fn zip_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data).expect("shape");
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (leading-axis batch broadcast).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add_broadcast", a, b)?;
        let vb = self.value(b).data().to_vec();
        let va = self.value(a);
        let l = vb.len();
        let data = va.data().iter().enumerate().map(|(i, &x)| x + vb[i % l]).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::AddBroadcast(a, b)))
    }

    /// `a * b` with the same broadcast rule as [`add_broadcast`](Self::add_broadcast).
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul_broadcast", a, b)?;
        let vb = self.value(b).data().to_vec();
        let va = self.value(a);
        let l = vb.len();
        let data = va.data().iter().enumerate().map(|(i, &x)| x * vb[i % l]).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::MulBroadcast(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, |a| a * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, |a| a + s, Op::AddScalar(x))
    }

    /// Matrix product over the last two axes.
    ///
    /// Supported forms: `[m,k]×[k,n]`, `[..,m,k]×[k,n]` (shared right-hand side, e.g. a
    /// weight matrix) and `[b,m,k]×[b,k,n]` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if shared_rhs {
            // fold the batch into rows
            gemm(batch * m, k, n, va, k as isize, 1, vb, n as isize, 1, 0.0, &mut out);
        } else {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[bi * m * k..],
                    k as isize,
                    1,
                    &vb[bi * k * n..],
                    n as isize,
                    1,
                    0.0,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        for b in 0..batch {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = v[o + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    /// Axis permutation of a rank-3 tensor: output axis `d` is input axis `perm[d]`.
    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("permute3", &s, &perm));
        }
        let mut sorted = perm;
        sorted.sort_unstable();
        if sorted != [0, 1, 2] {
            return Err(Error::invalid(format!("bad permutation {perm:?}")));
        }
        let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
        let in_strides = [s[1] * s[2], s[2], 1];
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(v.len());
        for i in 0..out_shape[0] {
            for j in 0..out_shape[1] {
                for k in 0..out_shape[2] {
                    let idx = [i, j, k];
                    let mut src = 0;
                    for d in 0..3 {
                        src += idx[d] * in_strides[perm[d]];
                    }
                    out.push(v[src]);
                }
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::Permute3(x, perm)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Concatenation along the last axis; all leading axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat(xs.to_vec())))
    }

    /// `x[..., start..start+len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or_else(|| Error::shape("slice_last", &s, &[start, len]))?;
        if start + len > w {
            return Err(Error::shape("slice_last", &s, &[start, len]));
        }
        let v = self.value(x).data();
        let rows = v.len() / w;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * w + start..r * w + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Slice { x, start, len }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).data();
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", &s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = s[axis];
        let v = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..d {
                let base = (o * d + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::SumAxis(x, axis)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, gelu, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::ln, Op::Ln(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.map_unary(x, |a| 1.0 / a, Op::Recip(x))
    }

    fn rowwise(&mut self, x: Var, f: impl Fn(&[f64], &mut [f64]), op: Op) -> Var {
        let v = self.value(x);
        let w = v.last_dim();
        let mut out = vec![0.0; v.len()];
        for (src, dst) in v.data().chunks(w).zip(out.chunks_mut(w)) {
            f(src, dst);
        }
        let t = Tensor::new(v.shape(), out).expect("shape");
        self.push(t, op)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.rowwise(
            x,
            |src, dst| {
                let mx = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mx).exp();
                    z += *d;
                }
                for d in dst.iter_mut() {
                    *d /= z;
                }
            },
            Op::Softmax(x),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.rowwise(
            x,
            |src, dst| {
                let mx = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lz = src.iter().map(|&s| (s - mx).exp()).sum::<f64>().ln() + mx;
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s - lz;
                }
            },
            Op::LogSoftmax(x),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let v = self.value(x);
        let w = v.last_dim();
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(Error::shape("layer_norm", v.shape(), self.shape(gamma)));
        }
        let rows = v.len() / w.max(1);
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &v.data()[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..w {
                xhat[r * w + c] = (row[c] - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % w] + b[i % w])
            .collect();
        let t = Tensor::new(v.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", &s, &[indices.len()]));
        }
        let d = s[1];
        let v = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::shape("embedding", &s, &[i]));
            }
            out.extend_from_slice(&v[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[indices.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Forward value `hard`, gradient passed unchanged to `soft` (straight-through).
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", self.shape(soft), hard.shape()));
        }
        Ok(self.push(hard, Op::StraightThrough(soft)))
    }

    /// `out[i, j, :] = u[i, :] + v[j, :]` for `u: [n, h]`, `v: [m, h]`.
    pub fn outer_add(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u).to_vec(), self.shape(v).to_vec());
        if su.len() != 2 || sv.len() != 2 || su[1] != sv[1] {
            return Err(Error::shape("outer_add", &su, &sv));
        }
        let (n, m, h) = (su[0], sv[0], su[1]);
        let (du, dv) = (self.value(u).data(), self.value(v).data());
        let mut out = Vec::with_capacity(n * m * h);
        for i in 0..n {
            for j in 0..m {
                for c in 0..h {
                    out.push(du[i * h + c] + dv[j * h + c]);
                }
            }
        }
        let t = Tensor::new(&[n, m, h], out)?;
        Ok(self.push(t, Op::OuterAdd(u, v)))
    }

    /// Pooled distribution of row counts for an `[n, n]` matrix of independent
    /// presence probabilities, diagonal excluded: row `i` counts `Σ_{j≠i} Bernoulli(p_ij)`
    /// and contributes its count distribution to bins `0..bins`, the last bin also
    /// collecting every larger count.
    ///
    /// For 0/1 inputs this is the exact count histogram, and the derivative with respect
    /// to `p_ij` is the histogram change caused by flipping that entry.
    pub fn count_histogram(&mut self, p: Var, bins: usize) -> Result<Var> {
        let s = self.shape(p).to_vec();
        if s.len() != 2 || s[0] != s[1] || bins < 2 {
            return Err(Error::shape("count_histogram", &s, &[bins]));
        }
        let n = s[0];
        let vp = self.value(p).data();
        let mut out = vec![0.0; bins];
        for i in 0..n {
            let row = count_distribution(&vp[i * n..(i + 1) * n], i, None, bins);
            for (o, r) in out.iter_mut().zip(&row) {
                *o += r;
            }
        }
        let t = Tensor::new(&[bins], out)?;
        Ok(self.push(t, Op::CountHistogram(p)))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        self.backward_with_seeds(&[(loss, Tensor::full(self.shape(loss), 1.0))])
    }

    /// Reverse pass seeded with explicit upstream gradients for several outputs.
    pub fn backward_with_seeds(&mut self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut top = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::shape("backward seed", self.shape(*v), g.shape()));
            }
            let len = g.len();
            accumulate(&mut grads[v.0], len, |buf| {
                for (b, x) in buf.iter_mut().zip(g.data()) {
                    *b += x;
                }
            });
            top = top.max(v.0 + 1);
        }
        self.backward_calls = 0;
        for id in (0..top).rev() {
            let (lo, hi) = grads.split_at_mut(id);
            let Some(g) = hi[0].as_deref() else {
                continue;
            };
            self.backward_calls += 1;
            self.backward_rule(id, g, lo);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_rule(&self, id: usize, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    accumulate(&mut lo[v.0], g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, x)| *o += x)
                    });
                }
            }
            Op::Sub(a, b) => {
                accumulate(&mut lo[a.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, x)| *o += x)
                });
                accumulate(&mut lo[b.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, x)| *o -= x)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(&mut lo[a.0], g.len(), |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * vb[i];
                    }
                });
                accumulate(&mut lo[b.0], g.len(), |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddBroadcast(a, b) => {
                accumulate(&mut lo[a.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, x)| *o += x)
                });
                let l = len_of(*b);
                accumulate(&mut lo[b.0], l, |buf| {
                    for (i, x) in g.iter().enumerate() {
                        buf[i % l] += x;
                    }
                });
            }
            Op::MulBroadcast(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let l = vb.len();
                accumulate(&mut lo[a.0], g.len(), |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * vb[i % l];
                    }
                });
                accumulate(&mut lo[b.0], l, |buf| {
                    for i in 0..g.len() {
                        buf[i % l] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                accumulate(&mut lo[a.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, x)| *o += s * x)
                });
            }
            Op::AddScalar(a) => {
                accumulate(&mut lo[a.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, x)| *o += x)
                });
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                if *shared_rhs {
                    let rows = batch * m;
                    // dA = dC · Bᵀ
                    accumulate(&mut lo[a.0], rows * k, |buf| {
                        gemm(rows, n, k, g, n as isize, 1, vb, 1, n as isize, 1.0, buf);
                    });
                    // dB = Aᵀ · dC
                    accumulate(&mut lo[b.0], k * n, |buf| {
                        gemm(k, rows, n, va, 1, k as isize, g, n as isize, 1, 1.0, buf);
                    });
                } else {
                    accumulate(&mut lo[a.0], batch * m * k, |buf| {
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..],
                                n as isize,
                                1,
                                &vb[bi * k * n..],
                                1,
                                n as isize,
                                1.0,
                                &mut buf[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    });
                    accumulate(&mut lo[b.0], batch * k * n, |buf| {
                        for bi in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &va[bi * m * k..],
                                1,
                                k as isize,
                                &g[bi * m * n..],
                                n as isize,
                                1,
                                1.0,
                                &mut buf[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                let s = self.nodes[x.0].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                accumulate(&mut lo[x.0], g.len(), |buf| {
                    let batch = g.len() / (r * c);
                    for b in 0..batch {
                        let o = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                buf[o + i * c + j] += g[o + j * r + i];
                            }
                        }
                    }
                });
            }
            Op::Permute3(x, perm) => {
                let s = self.nodes[x.0].value.shape();
                let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
                let in_strides = [s[1] * s[2], s[2], 1];
                accumulate(&mut lo[x.0], g.len(), |buf| {
                    let mut o = 0;
                    for i in 0..out_shape[0] {
                        for j in 0..out_shape[1] {
                            for k in 0..out_shape[2] {
                                let idx = [i, j, k];
                                let mut src = 0;
                                for d in 0..3 {
                                    src += idx[d] * in_strides[perm[d]];
                                }
                                buf[src] += g[o];
                                o += 1;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                accumulate(&mut lo[x.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, v)| *o += v)
                });
            }
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|x| self.nodes[x.0].value.last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (x, &w) in xs.iter().zip(&widths) {
                    accumulate(&mut lo[x.0], rows * w, |buf| {
                        for r in 0..rows {
                            for c in 0..w {
                                buf[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, start, len } => {
                let w = self.nodes[x.0].value.last_dim();
                let rows = g.len() / (*len).max(1);
                accumulate(&mut lo[x.0], rows * w, |buf| {
                    for r in 0..rows {
                        for c in 0..*len {
                            buf[r * w + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                accumulate(&mut lo[x.0], len_of(*x), |buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(x) => {
                let l = len_of(*x);
                let s = g[0] / l.max(1) as f64;
                accumulate(&mut lo[x.0], l, |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::SumAxis(x, axis) => {
                let s = self.nodes[x.0].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let d = s[*axis];
                accumulate(&mut lo[x.0], outer * d * inner, |buf| {
                    for o in 0..outer {
                        for a in 0..d {
                            let base = (o * d + a) * inner;
                            for i in 0..inner {
                                buf[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                accumulate(&mut lo[x.0], g.len(), |buf| {
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                accumulate(&mut lo[x.0], g.len(), |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * gelu_grad(vx[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                accumulate(&mut lo[x.0], g.len(), |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }
            Op::Ln(x) => {
                let vx = val(*x);
                accumulate(&mut lo[x.0], g.len(), |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] / vx[i];
                    }
                });
            }
            Op::Recip(x) => {
                let y = node.value.data();
                accumulate(&mut lo[x.0], g.len(), |buf| {
                    for i in 0..g.len() {
                        buf[i] -= g[i] * y[i] * y[i];
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                accumulate(&mut lo[x.0], g.len(), |buf| {
                    for r in 0..g.len() / w {
                        let (gr, yr) = (&g[r * w..(r + 1) * w], &y[r * w..(r + 1) * w]);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..w {
                            buf[r * w + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                accumulate(&mut lo[x.0], g.len(), |buf| {
                    for r in 0..g.len() / w {
                        let gr = &g[r * w..(r + 1) * w];
                        let total: f64 = gr.iter().sum();
                        for c in 0..w {
                            buf[r * w + c] += gr[c] - y[r * w + c].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let w = node.value.last_dim();
                let gam = val(*gamma);
                accumulate(&mut lo[gamma.0], w, |buf| {
                    for i in 0..g.len() {
                        buf[i % w] += g[i] * xhat[i];
                    }
                });
                accumulate(&mut lo[beta.0], w, |buf| {
                    for i in 0..g.len() {
                        buf[i % w] += g[i];
                    }
                });
                accumulate(&mut lo[x.0], g.len(), |buf| {
                    let mut dxhat = vec![0.0; w];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let o = r * w;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..w {
                            dxhat[c] = g[o + c] * gam[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[o + c];
                        }
                        mean_d /= w as f64;
                        mean_dx /= w as f64;
                        for c in 0..w {
                            buf[o + c] += is * (dxhat[c] - mean_d - xhat[o + c] * mean_dx);
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let d = self.nodes[table.0].value.last_dim();
                accumulate(&mut lo[table.0], len_of(*table), |buf| {
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..d {
                            buf[i * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::StraightThrough(soft) => {
                accumulate(&mut lo[soft.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, v)| *o += v)
                });
            }
            Op::OuterAdd(u, v) => {
                let su = self.nodes[u.0].value.shape();
                let sv = self.nodes[v.0].value.shape();
                let (n, m, h) = (su[0], sv[0], su[1]);
                accumulate(&mut lo[u.0], n * h, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            for c in 0..h {
                                buf[i * h + c] += g[(i * m + j) * h + c];
                            }
                        }
                    }
                });
                accumulate(&mut lo[v.0], m * h, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            for c in 0..h {
                                buf[j * h + c] += g[(i * m + j) * h + c];
                            }
                        }
                    }
                });
            }
            Op::CountHistogram(p) => {
                let vp = val(*p);
                let n = (vp.len() as f64).sqrt() as usize;
                let bins = g.len();
                accumulate(&mut lo[p.0], vp.len(), |buf| {
                    for i in 0..n {
                        let row = &vp[i * n..(i + 1) * n];
                        for j in (0..n).filter(|&j| j != i) {
                            // d/dp of (1-p)·P + p·shift(P), with P the distribution without j
                            let rest = count_distribution(row, i, Some(j), bins);
                            // the overflow bin keeps its own mass, so only the shift survives
                            buf[i * n + j] += (1..bins).map(|k| (g[k] - g[k - 1]) * rest[k - 1]).sum::<f64>();
                        }
                    }
                });
            }
        }
    }
}

/// Truncated Poisson-binomial distribution of `Σ row[j]` over `j ∉ {skip_a, skip_b}`.
fn count_distribution(row: &[f64], skip_a: usize, skip_b: Option<usize>, bins: usize) -> Vec<f64> {
    let mut dist = vec![0.0; bins];
    dist[0] = 1.0;
    for (j, &q) in row.iter().enumerate() {
        if j == skip_a || Some(j) == skip_b {
            continue;
        }
        let top = dist[bins - 1];
        for k in (1..bins).rev() {
            dist[k] = (1.0 - q) * dist[k] + q * dist[k - 1];
        }
        dist[bins - 1] += q * top;
        dist[0] *= 1.0 - q;
    }
    dist
}
