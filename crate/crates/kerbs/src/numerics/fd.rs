//! Central finite differences, the gradient oracle everything else is
//! checked against.

use crate::error::{KerbsError, Result};
use crate::numerics::tensor::Tensor;

/// Central-difference gradient estimate of a scalar function, one coordinate
/// at a time: `(f(x+h) - f(x-h)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(KerbsError::Numeric(format!(
                "non-finite evaluation at coordinate {i}: f+={fp}, f-={fm}"
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error with a floored denominator, the comparison used by every
/// gradient check in the crate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
