//! Central finite-difference verification of reverse-mode gradients.

use super::autograd::{backward, no_grad};
use super::Tensor;
use crate::error::{Error, Result};

/// Elements whose analytic and numeric gradients are both below this are
/// treated as exact zeros (otherwise roundoff noise dominates the ratio).
const DEAD_ZONE: f64 = 1e-7;

/// Compare the reverse-mode gradient of `f` at `x` against central finite
/// differences, returning the maximum relative error over all elements.
///
/// `f` must reduce to a scalar. The numeric probe runs without the tape.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let leaf = x.requires_grad_leaf();
    let loss = f(&leaf)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss { numel: loss.numel() });
    }
    backward(&loss)?;
    let analytic = leaf
        .grad()
        .ok_or_else(|| Error::invalid("grad_check", "no gradient reached the input"))?;

    let base = x.to_vec();
    let shape = x.shape();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let (fp, fm) = no_grad(|| -> Result<(f64, f64)> {
            let fp = f(&Tensor::from_parts(shape, plus, false, None))?.item()?;
            let fm = f(&Tensor::from_parts(shape, minus, false, None))?.item()?;
            Ok((fp, fm))
        })?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        if scale < DEAD_ZONE {
            continue;
        }
        let rel = (a - numeric).abs() / scale;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
