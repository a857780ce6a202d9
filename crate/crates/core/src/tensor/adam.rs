//! Adam optimizer with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Param;
use crate::error::{Error, Result};

/// Optimizer state for one parameter group.
///
/// Moment buffers are allocated to match each parameter's shape at
/// construction. `step_count` is incremented before the bias correction of
/// each update.
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub step_count: u64,
    pub(crate) moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(params: &[Param], lr: f32, beta1: f32, beta2: f32) -> Result<AdamState> {
        if lr <= 0.0 {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::config(format!(
                "Adam betas must lie in [0, 1), got ({beta1}, {beta2})"
            )));
        }
        let moments = params
            .iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .collect();
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            epsilon: 1e-8,
            step_count: 0,
            moments,
        })
    }

    /// Apply one update from the gradients currently stored in `params`.
    /// The slice must be the one the state was built for, in the same order.
    pub fn step(&mut self, params: &[Param]) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(Error::config(format!(
                "optimizer built for {} params, stepped with {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        for (p, (m, v)) in params.iter().zip(self.moments.iter_mut()) {
            if m.len() != p.numel() {
                return Err(Error::shape(format!(
                    "moment buffer of {} values does not match param shape {:?}",
                    m.len(),
                    p.shape()
                )));
            }
            let grad = p.grad().clone();
            let mut data = p.to_vec();
            adam_update(
                &mut data,
                &grad,
                m,
                v,
                self.step_count,
                self.lr,
                self.beta1,
                self.beta2,
                self.epsilon,
            );
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// The raw Adam update on one buffer:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)` with bias-corrected moments.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    data: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    epsilon: f32,
) {
    let c1 = 1.0 - libm::powf(beta1, step as f32);
    let c2 = 1.0 - libm::powf(beta2, step as f32);
    for i in 0..data.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        data[i] -= lr * m_hat / (libm::sqrtf(v_hat) + epsilon);
    }
}
