//! Central finite-difference verification for scalar-valued tensor functions.

use super::{Graph, TensorId};
use crate::error::Result;
use crate::real::Real;

/// Compares the analytic gradient of `f` at `x0` against central differences.
///
/// `f` receives a fresh graph and the id of a `requires_grad` leaf holding the
/// current input, and must return a scalar output. Returns the max over
/// coordinates of `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn finite_diff_check<R, F>(mut f: F, x0: &[R], shape: &[usize], eps: R) -> Result<R>
where
    R: Real,
    F: FnMut(&mut Graph<R>, TensorId) -> Result<TensorId>,
{
    let mut g = Graph::new();
    let x = g.leaf_grad(shape, x0.to_vec())?;
    let out = f(&mut g, x)?;
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .map(<[R]>::to_vec)
        .unwrap_or_else(|| vec![R::zero(); x0.len()]);

    let mut max_err = R::zero();
    let floor = R::c(1e-8);
    for k in 0..x0.len() {
        let mut eval = |delta: R| -> Result<R> {
            let mut gp = Graph::new();
            let mut xs = x0.to_vec();
            xs[k] += delta;
            let xt = gp.leaf(shape, xs)?;
            let o = f(&mut gp, xt)?;
            Ok(gp.scalar(o))
        };
        let fd = (eval(eps)? - eval(-eps)?) / (R::c(2.0) * eps);
        let denom = analytic[k].abs().max(fd.abs()).max(floor);
        let err = (analytic[k] - fd).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
