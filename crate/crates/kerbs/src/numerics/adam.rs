//! Bias-corrected Adam over a fixed list of parameter tensors.

use crate::error::{KerbsError, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh optimizer state with zero moments matching `params`.
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn with_hyper(mut self, beta1: f64, beta2: f64, eps: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn hyper(&self) -> (f64, f64, f64) {
        (self.beta1, self.beta2, self.eps)
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Rebuild state from checkpointed parts.
    pub fn from_parts(
        step: u64,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Self {
        AdamState {
            step,
            lr,
            beta1,
            beta2,
            eps,
            m,
            v,
        }
    }

    /// One bias-corrected update. `params` and `grads` must line up with the
    /// state's moment tensors.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(KerbsError::Dimension(format!(
                "adam: {} params / {} grads vs {} state groups",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if !p.same_shape(&self.m[i]) || !grads[i].same_shape(&self.m[i]) {
                return Err(KerbsError::Dimension(format!(
                    "adam group {i}: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    grads[i].shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * gd[j];
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * gd[j] * gd[j];
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Zero the moment entries `[start, start+len)` of group `group`. Used
    /// when a sense slot is re-initialized: its old momentum is meaningless.
    pub fn zero_moment_span(&mut self, group: usize, start: usize, len: usize) {
        for t in [&mut self.m[group], &mut self.v[group]] {
            for x in &mut t.data_mut()[start..start + len] {
                *x = 0.0;
            }
        }
    }
}
