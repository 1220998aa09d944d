//! Adam with decoupled weight decay.

use super::TrainConfig;
use crate::model::ModelParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers aligned with the parameter entries.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let m = params
            .entries()
            .map(|(def, tensor)| {
                if def.trainable {
                    vec![0.0; tensor.numel()]
                } else {
                    Vec::new()
                }
            })
            .collect::<Vec<_>>();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update on a flat buffer. Decoupled weight decay
/// is applied directly to the values when `weight_decay > 0`.
pub fn adam_update(
    values: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..values.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        if weight_decay > 0.0 {
            values[i] -= lr * weight_decay * values[i];
        }
    }
}

/// Applies one optimizer step to every trainable parameter. `grads` is
/// aligned with the parameter entries; `None` means no gradient reached the
/// parameter this step (treated as zero). Weight decay touches only
/// decay-flagged parameters (weights, not biases or norm scales).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    adam_step_with_lr(params, grads, state, cfg.lr, cfg.weight_decay);
}

pub fn adam_step_with_lr(
    params: &mut ModelParams,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    state.t += 1;
    let t = state.t;
    let zero_cache: Vec<f64> = Vec::new();
    for idx in 0..params.len() {
        if !params.def(idx).trainable {
            continue;
        }
        let decay = if params.def(idx).decay { weight_decay } else { 0.0 };
        let numel = params.tensor(idx).numel();
        let zeros;
        let grad: &[f64] = match &grads[idx] {
            Some(g) => g,
            None => {
                zeros = vec![0.0; numel];
                &zeros
            }
        };
        adam_update(
            params.tensor_mut(idx).data_mut(),
            grad,
            &mut state.m[idx],
            &mut state.v[idx],
            t,
            lr,
            decay,
        );
    }
    let _ = zero_cache;
}
