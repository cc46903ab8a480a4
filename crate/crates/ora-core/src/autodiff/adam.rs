use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults follow the usual beta1=0.9, beta2=0.999,
/// eps=1e-8 setting.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment state, one slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn for_params(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. `grads[i]` pairs with `params[i]`;
/// a `None` gradient is treated as zero (the moments still decay).
/// Non-finite gradients abort training instead of silently diverging.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Option<&Tensor>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "params {} grads {} state {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != params[i].len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("param {} len {} vs grad len {}", i, params[i].len(), g.len()),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (i, p) in params.iter_mut().enumerate() {
        let zero = [];
        let gdata: &[f64] = grads[i].map(|g| g.data()).unwrap_or(&zero);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = gdata.get(j).copied().unwrap_or(0.0);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
