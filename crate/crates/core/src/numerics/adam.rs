use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators, created lazily on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<(), NumericsError> {
    if params.len() != grads.len() {
        return Err(NumericsError::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NumericsError::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
        return Err(NumericsError::Shape("optimizer state does not match the parameters".into()));
    }

    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
