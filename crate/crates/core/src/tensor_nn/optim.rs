use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW moment accumulators for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(num_params: usize, config: AdamWConfig) -> Self {
        Self { config, first: vec![0.0; num_params], second: vec![0.0; num_params], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// Non-finite gradients are rejected before any state is touched.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    check_len(state.len(), params.len())?;
    check_len(state.len(), grads.len())?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }
    let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.first).zip(&mut state.second) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * weight_decay * *p;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}
