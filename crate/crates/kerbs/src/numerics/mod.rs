//! Tensor algebra, the reverse-mode tape, the Adam optimizer, and the
//! finite-difference gradient oracle.

pub mod adam;
pub mod fd;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use fd::finite_diff_grad;
pub use tape::{Gradients, NodeId, Tape, NORM_FLOOR};
pub use tensor::Tensor;

use crate::error::{KerbsError, Result};

/// Stable log(sum(exp(x))) via max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    debug_assert!(!x.is_empty());
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Softmax with max subtraction; safe for logits up to around +-700.
pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(KerbsError::Dimension("softmax of empty input".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(KerbsError::Numeric("softmax of NaN input".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    Ok(out)
}
