//! Adam with decoupled weight decay and a linear learning-rate schedule.
//!
//! The decay term multiplies the parameters directly rather than being
//! folded into the gradient, and the learning rate falls linearly from its
//! initial value to exactly zero at the final step.

use serde::{Deserialize, Serialize};

use super::params::{Element, ModelParams};
use super::ModelError;

/// Exponential decay for the first moment.
pub const BETA1: f64 = 0.9;
/// Exponential decay for the second moment.
pub const BETA2: f64 = 0.999;
/// Denominator stabilizer.
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate used by full-scale training recipes on real VQA models.
/// A randomly-initialized model this small undertrains badly at that rate,
/// so the toy-scale default is [`TrainConfig::default`]'s 3e-4; this
/// constant is kept as a plain config value for fidelity experiments.
pub const FIDELITY_LEARNING_RATE: f64 = 2e-5;

/// Hyperparameters for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 3e-4,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

/// First/second moment accumulators plus the step counter and schedule
/// horizon. `step` counts completed optimizer steps, so the step about to
/// run sees learning rate `lr₀·(1 − step/total_steps)`.
#[derive(Debug, Clone)]
pub struct OptimizerState<E: Element> {
    pub m: ModelParams<E>,
    pub v: ModelParams<E>,
    pub step: u64,
    pub total_steps: u64,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(params: &ModelParams<E>, total_steps: u64) -> Self {
        OptimizerState {
            m: ModelParams::zeros_like(params),
            v: ModelParams::zeros_like(params),
            step: 0,
            total_steps,
        }
    }
}

/// The scheduled learning rate for the step with (zero-based) index
/// `step` out of `total_steps`: exactly linear, reaching zero at the end.
pub fn schedule_lr(lr0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total_steps as f64)
}

/// Applies one update in place. A call at `step == total_steps` sees a
/// zero learning rate and leaves the parameters unchanged; any call past
/// that fails with [`ModelError::ScheduleExhausted`].
pub fn optimizer_step<E: Element>(
    params: &mut ModelParams<E>,
    grads: &ModelParams<E>,
    state: &mut OptimizerState<E>,
    config: &TrainConfig,
) -> Result<(), ModelError> {
    if state.step > state.total_steps {
        return Err(ModelError::ScheduleExhausted {
            step: state.step,
            total: state.total_steps,
        });
    }
    let lr = schedule_lr(config.learning_rate, state.step, state.total_steps);
    let decay = config.weight_decay;
    // Bias correction uses the one-based step index.
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);

    let mut theta = params.tensors_mut();
    let grad = grads.tensors();
    let mut m = state.m.tensors_mut();
    let mut v = state.v.tensors_mut();
    for i in 0..theta.len() {
        let g_tensor = grad[i];
        let m_tensor = &mut m[i];
        let v_tensor = &mut v[i];
        let t_tensor = &mut theta[i];
        for ((p, &g), (m_e, v_e)) in t_tensor
            .iter_mut()
            .zip(g_tensor.iter())
            .zip(m_tensor.iter_mut().zip(v_tensor.iter_mut()))
        {
            let g = g.as_f64();
            let m_new = BETA1 * m_e.as_f64() + (1.0 - BETA1) * g;
            let v_new = BETA2 * v_e.as_f64() + (1.0 - BETA2) * g * g;
            *m_e = E::cast(m_new);
            *v_e = E::cast(v_new);
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let p_f64 = p.as_f64();
            *p = E::cast(p_f64 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS) - lr * decay * p_f64);
        }
    }
    state.step += 1;
    Ok(())
}
