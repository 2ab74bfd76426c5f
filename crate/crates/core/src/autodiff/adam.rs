use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors in canonical (sorted) order.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Gradients keyed by parameter name.
pub type GradSet = BTreeMap<String, Vec<f64>>;

pub const DEFAULT_BETA1: f64 = 0.5;
pub const DEFAULT_BETA2: f64 = 0.99;
pub const DEFAULT_WEIGHT_DECAY: f64 = 3e-4;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = params
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
            .collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first_moment.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second_moment.get(name).map(Vec::as_slice)
    }

    /// One optimizer step. Parameters without an entry in `grads` still get
    /// weight decay and a moment update with a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Dimension(format!("gradient for unknown parameter `{name}`")))?;
            if p.len() != g.len() {
                return Err(Error::Dimension(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    p.len()
                )));
            }
        }
        for (name, p) in params.iter() {
            let m = self.first_moment.get(name);
            if m.map(Vec::len) != Some(p.len()) {
                return Err(Error::Dimension(format!(
                    "optimizer state for `{name}` does not match shape {:?}",
                    p.shape()
                )));
            }
        }

        self.step_count += 1;
        let AdamConfig {
            beta1,
            beta2,
            weight_decay,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            let m = self.first_moment.get_mut(name).unwrap();
            let v = self.second_moment.get_mut(name).unwrap();
            for (i, w) in p.values_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                *w *= 1.0 - lr * weight_decay;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
