use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs())
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", v.shape(), &[]));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite function value".into()));
    }
    Ok(y)
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// Returns `max_i |g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite input".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let ad = grads.get_or_zero(xv);
    if !ad.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite gradient".into()));
    }
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(ad.data()[i], fd));
    }
    Ok(worst)
}

/// Gradient check with respect to every scalar of every parameter in `store`.
///
/// `f` builds the scalar loss on the tape, reading parameters through
/// [`Tape::param`]. `stride` > 1 checks every `stride`-th scalar only.
pub fn grad_check_params<F>(f: F, store: &ParamStore, eps: f64, stride: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let ad = tape.param_grads(&grads, store);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let o = f(&mut t, s)?;
        let y = t.value(o).item();
        if !y.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite loss".into()));
        }
        Ok(y)
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    let mut counter = 0usize;
    for p in 0..store.len() {
        for i in 0..store.tensors()[p].len() {
            counter += 1;
            if (counter - 1) % stride.max(1) != 0 {
                continue;
            }
            let orig = probe.tensors()[p].data()[i];
            probe.tensors_mut()[p].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.tensors_mut()[p].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.tensors_mut()[p].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(ad[p].data()[i], fd));
        }
    }
    Ok(worst)
}
