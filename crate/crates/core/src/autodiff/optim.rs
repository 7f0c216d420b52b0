//! AdamW with bias-corrected moments and decoupled weight decay:
//!
//! ```text
//! θ ← θ - lr·wd·θ
//! m ← β₁ m + (1 - β₁) g
//! v ← β₂ v + (1 - β₂) g²
//! θ ← θ - lr · (m / (1 - β₁ᵗ)) / (√(v / (1 - β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-4, weight_decay: 3e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Restores a previously saved state.
    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update at an explicit learning rate. Rejects the step, leaving
    /// parameters and state untouched, if any gradient is non-finite.
    pub fn step_with_lr(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients / {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.get(super::params::ParamId(i)).shape() {
                return Err(Error::dim("adamw", format!("gradient {i} shape {:?}", g.shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} is not finite; step rejected",
                    params.name(super::params::ParamId(i))
                )));
            }
        }
        self.step += 1;
        let AdamWConfig { weight_decay, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(super::params::ParamId(i));
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (pj, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.to_f64();
                let mut theta = pj.to_f64();
                theta -= lr * weight_decay * theta;
                let mj = beta1 * m[j].to_f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].to_f64() + (1.0 - beta2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                theta -= lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                *pj = T::from_f64(theta);
            }
        }
        Ok(())
    }
}
