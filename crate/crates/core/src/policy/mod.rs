//! Policy and value networks over per-element velocity samples.
//!
//! Both networks share the same convolutional trunk shape but not weights.
//! The policy applies its trunk to every element to get a pre-squash mean;
//! a single learned `log_std` sets the exploration noise. The value network
//! averages its trunk outputs over the elements and feeds the mean, together
//! with the simulation time, into a linear head whose output is multiplied by
//! a fixed `value_scale`.

mod adam;
mod checkpoint;
mod dist;
mod net;

use rand::Rng;
use thiserror::Error;

use crate::sim::FlowField;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use dist::{sigmoid, squash, unsquash, ActionDistribution, ACTION_MAX, LOG_STD_MAX, LOG_STD_MIN};
pub use net::{Architecture, ConvLayer};

pub const INITIAL_LOG_STD: f64 = -1.0;
/// Value head entries following the trunk: weight of the element mean,
/// weight of the time feature, bias.
pub const VALUE_HEAD: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("action {0} outside (0, 0.5)")]
    OutOfSupport(f64),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: Architecture,
    /// Policy trunk weights followed by `log_std`.
    pub theta: Vec<f64>,
    /// Value trunk weights followed by the [`VALUE_HEAD`] entries.
    pub value_params: Vec<f64>,
    /// Fixed factor on the value head output, so that the trained weights
    /// stay of order one whatever the magnitude of the returns.
    pub value_scale: f64,
}

impl PolicyParams {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.n_params();
        Self { theta: vec![0.0; n + 1], value_params: vec![0.0; n + VALUE_HEAD], value_scale: 1.0, arch }
    }

    pub fn init<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self, PolicyError> {
        arch.validate()?;
        let mut theta = arch.init_params(rng, 0.01);
        theta.push(INITIAL_LOG_STD);
        let mut value_params = arch.init_params(rng, 1.0);
        value_params.extend([1.0, 0.0, 0.0]);
        Ok(Self { arch, theta, value_params, value_scale: 1.0 })
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        self.arch.validate()?;
        let n = self.arch.n_params();
        if self.theta.len() != n + 1 {
            return Err(PolicyError::ShapeMismatch { expected: n + 1, got: self.theta.len() });
        }
        if self.value_params.len() != n + VALUE_HEAD {
            return Err(PolicyError::ShapeMismatch { expected: n + VALUE_HEAD, got: self.value_params.len() });
        }
        if !(self.value_scale.is_finite() && self.value_scale > 0.0) {
            return Err(PolicyError::Architecture(format!("value scale {} must be positive", self.value_scale)));
        }
        Ok(())
    }

    pub fn n_policy_params(&self) -> usize {
        self.theta.len()
    }

    pub fn log_std(&self) -> f64 {
        self.theta[self.theta.len() - 1]
    }

    pub fn clamp_log_std(&mut self) {
        let i = self.theta.len() - 1;
        self.theta[i] = self.theta[i].clamp(LOG_STD_MIN, LOG_STD_MAX);
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.value_params).all(|v| v.is_finite())
    }

    fn check_state(&self, state: &FlowField) -> Result<(), PolicyError> {
        let m = state.grid.points_per_element();
        if m != self.arch.points_per_element {
            return Err(PolicyError::ShapeMismatch { expected: self.arch.points_per_element, got: m });
        }
        Ok(())
    }

    fn trunk(&self) -> usize {
        self.arch.n_params()
    }

    pub fn policy_forward(&self, state: &FlowField) -> Result<ActionDistribution, PolicyError> {
        self.check_state(state)?;
        let w = &self.theta[..self.trunk()];
        let mu = (0..state.grid.n_elements).map(|e| self.arch.forward(w, state.element(e))).collect();
        Ok(ActionDistribution { mu, log_std: self.log_std() })
    }

    pub fn value_forward(&self, state: &FlowField) -> Result<f64, PolicyError> {
        self.check_state(state)?;
        let n = self.trunk();
        let w = &self.value_params[..n];
        let n_el = state.grid.n_elements;
        let mean = (0..n_el).map(|e| self.arch.forward(w, state.element(e))).sum::<f64>() / n_el as f64;
        let head = &self.value_params[n..];
        Ok(self.value_scale * (head[0] * mean + head[1] * state.time + head[2]))
    }

    /// Adds `weight * d log pi(action | state) / d theta` into `grad`.
    pub fn accumulate_log_prob_grad(
        &self,
        state: &FlowField,
        dist: &ActionDistribution,
        action: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        if grad.len() != self.theta.len() {
            return Err(PolicyError::ShapeMismatch { expected: self.theta.len(), got: grad.len() });
        }
        let (d_mu, d_log_std) = dist.log_prob_grad(action)?;
        let n = self.trunk();
        for (e, d) in d_mu.iter().enumerate() {
            self.arch.backward(&self.theta[..n], state.element(e), weight * d, &mut grad[..n]);
        }
        grad[n] += weight * d_log_std;
        Ok(())
    }

    /// Adds `weight * d entropy / d theta`; only `log_std` contributes.
    pub fn accumulate_entropy_grad(&self, n_elements: usize, weight: f64, grad: &mut [f64]) {
        let i = self.theta.len() - 1;
        grad[i] += weight * n_elements as f64;
    }

    /// Adds `weight * d V(state) / d value_params` into `grad`.
    pub fn accumulate_value_grad(&self, state: &FlowField, weight: f64, grad: &mut [f64]) -> Result<(), PolicyError> {
        self.check_state(state)?;
        if grad.len() != self.value_params.len() {
            return Err(PolicyError::ShapeMismatch { expected: self.value_params.len(), got: grad.len() });
        }
        let n = self.trunk();
        let n_el = state.grid.n_elements;
        let w_mean = self.value_params[n];
        let weight = weight * self.value_scale;
        let (trunk_grad, head_grad) = grad.split_at_mut(n);
        let mut mean = 0.0;
        for e in 0..n_el {
            let x = state.element(e);
            mean += self.arch.forward(&self.value_params[..n], x);
            self.arch.backward(&self.value_params[..n], x, weight * w_mean / n_el as f64, trunk_grad);
        }
        mean /= n_el as f64;
        head_grad[0] += weight * mean;
        head_grad[1] += weight * state.time;
        head_grad[2] += weight;
        Ok(())
    }
}
