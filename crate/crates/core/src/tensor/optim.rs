//! Adam with decoupled weight decay, and the Noam learning-rate schedule.

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.90,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment buffers, one pair per parameter slot.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros: Vec<_> = params.values().map(|v| Tensor::zeros(v.shape())).collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn from_parts(step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Self {
        Self { step, first, second }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// One bias-corrected Adam update of every slot, using the gradients
    /// stored in `params`.
    pub fn step(&mut self, params: &mut ParameterSet<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(Error::contract("optimizer state does not match parameter set"));
        }
        for (id, name) in params.slots() {
            if params.grad(id).is_none() {
                return Err(Error::contract(format!("missing gradient for {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (lr_t, eps, wd) = (T::lit(lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        let ids: Vec<_> = params.slots().into_iter().map(|(id, _)| id).collect();
        for id in ids {
            let g = params.grad(id).cloned().expect("checked above");
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr_t * (mhat / (vhat.sqrt() + eps) + wd * w[i]);
            }
        }
        Ok(())
    }
}

/// `peak * min(step / warmup, sqrt(warmup / step))`; equals `peak` at `step == warmup`.
pub fn noam_lr(step: u64, warmup: u64, peak: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("noam schedule starts at step 1"));
    }
    if warmup == 0 {
        return Ok(peak / (step as f64).sqrt());
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(peak * (s / w).min((w / s).sqrt()))
}
