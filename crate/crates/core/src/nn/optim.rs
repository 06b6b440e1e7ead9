//! Adam with decoupled weight decay, and the warm-restart cosine schedule.

use super::tensor::Param;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&mut Param]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One optimizer step over `params` using their accumulated gradients.
///
/// Weight decay is decoupled: parameters shrink by `lr * wd * param` before
/// the bias-corrected Adam update, so the decay never flows through the
/// moment estimates.
pub fn adam_step(params: &mut [&mut Param], state: &mut AdamState, lr: f64, weight_decay: f64) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (idx, param) in params.iter_mut().enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let grads = param.grad.data().to_vec();
        for (i, value) in param.value.data_mut().iter_mut().enumerate() {
            if weight_decay != 0.0 {
                *value -= lr * weight_decay * *value;
            }
            let g = grads[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *value -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Cosine annealing with warm restarts, constant period, floor at zero:
/// `lr = lr_max/2 * (1 + cos(pi * (step mod tau0) / tau0))`.
pub fn cosine_lr(step: u64, lr_max: f64, tau0: u64) -> f64 {
    let phase = (step % tau0) as f64 / tau0 as f64;
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * phase).cos())
}
