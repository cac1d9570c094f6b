//! Adam with decoupled weight decay and the warmup/decay schedule.

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; embeddings, biases and layer norms are
    /// excluded.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup: u64,
    pub total: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.warmup > self.total {
            return Err(Error::Config(format!(
                "warmup {} exceeds total steps {}",
                self.warmup, self.total
            )));
        }
        Ok(())
    }
}

/// Piecewise-linear schedule: 0 -> peak over the warmup, then peak -> 0 at
/// the final step.
pub fn lr_at(step: u64, schedule: &ScheduleConfig) -> f64 {
    if schedule.total == 0 {
        return 0.0;
    }
    if step >= schedule.total {
        return 0.0;
    }
    if schedule.warmup > 0 && step <= schedule.warmup {
        return schedule.peak_lr * step as f64 / schedule.warmup as f64;
    }
    schedule.peak_lr * (schedule.total - step) as f64 / (schedule.total - schedule.warmup) as f64
}

/// First/second moment accumulators, one per parameter tensor in canonical
/// visit order, plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn init(params: &EncoderParams<T>) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t, _| m.push(Tensor::zeros(t.shape())));
        let v = m.clone();
        AdamState { step: 0, m, v }
    }
}

/// One optimizer step. All gradients are checked for finiteness before
/// anything mutates; a non-finite gradient aborts the step.
pub fn adam_step<T: Scalar>(
    params: &mut EncoderParams<T>,
    state: &mut AdamState<T>,
    grads: &[Tensor<T>],
    opt: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            state.m.len()
        )));
    }
    for (i, gradient) in grads.iter().enumerate() {
        if !gradient.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {i}; step aborted"
            )));
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - opt.beta1.powi(t as i32);
    let bc2 = 1.0 - opt.beta2.powi(t as i32);
    let (b1, b2) = (T::from_f64(opt.beta1), T::from_f64(opt.beta2));
    let one_m_b1 = T::from_f64(1.0 - opt.beta1);
    let one_m_b2 = T::from_f64(1.0 - opt.beta2);
    let eps = T::from_f64(opt.eps);
    let lr_t = T::from_f64(lr);
    let inv_bc1 = T::from_f64(1.0 / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let decay = T::from_f64(lr * opt.weight_decay);

    let mut idx = 0usize;
    params.visit_mut(&mut |p, kind| {
        let g = &grads[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for c in 0..p.numel() {
            let gc = g.data()[c];
            let mc = b1 * m.data()[c] + one_m_b1 * gc;
            let vc = b2 * v.data()[c] + one_m_b2 * gc * gc;
            m.data_mut()[c] = mc;
            v.data_mut()[c] = vc;
            let m_hat = mc * inv_bc1;
            let v_hat = vc * inv_bc2;
            let mut pc = p.data()[c] - lr_t * m_hat / (v_hat.sqrt() + eps);
            if kind.decayed() {
                pc = pc - decay * p.data()[c];
            }
            p.data_mut()[c] = pc;
        }
        idx += 1;
    });
    Ok(())
}
