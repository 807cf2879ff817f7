use ndarray::{ArrayD, Zip};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments per parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
    /// Reported in divergence errors.
    pub epoch: usize,
}

impl OptimizerState {
    pub fn new(params: &[ArrayD<f64>]) -> Self {
        Self {
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            step: 0,
            epoch: 0,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay
/// `θ ← θ − lr (m̂ / (√v̂ + eps) + wd_i θ)`, where `weight_decay[i]` applies
/// to parameter array `i`.
pub fn adam_step(
    params: &mut [ArrayD<f64>],
    grads: &[ArrayD<f64>],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
    weight_decay: &[f64],
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || weight_decay.len() != n {
        return Err(Error::contract("adam_step: parameter, gradient and state counts differ"));
    }
    for i in 0..n {
        if grads[i].shape() != params[i].shape() || state.m[i].shape() != params[i].shape() {
            return Err(Error::contract(format!("adam_step: shape mismatch for parameter {i}")));
        }
    }
    let step = state.step + 1;
    if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::TrainingDiverged {
            epoch: state.epoch,
            step: step as usize,
            msg: format!("non-finite gradient for parameter {i}"),
        });
    }
    state.step = step;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let lr = cfg.learning_rate;
    for i in 0..n {
        let wd = weight_decay[i];
        Zip::from(&mut params[i])
            .and(&grads[i])
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + cfg.eps) + wd * *p);
            });
    }
    Ok(())
}
