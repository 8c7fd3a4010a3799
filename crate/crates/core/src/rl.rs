//! Trajectories, returns and advantages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::FlowField;

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("length mismatch: {rewards} rewards vs {values} value estimates")]
    LengthMismatch { rewards: usize, values: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparams(String),
}

/// One agent decision: the state it saw, the action it took, and the reward
/// received on arriving in that state. The reward of step 0 is always 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: FlowField,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub value_estimate: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub env_id: usize,
    pub steps: Vec<Step>,
    /// Reward for the transition out of the last step (r_n).
    pub final_reward: f64,
    /// Value assumed after the last transition. Zero for a regular terminal
    /// state; the discounted penalty of the skipped steps after a blow-up.
    pub bootstrap_value: f64,
    /// Steps that never ran because the simulation blew up; each counts as
    /// a reward of -1 in the reported return.
    pub penalty_steps: usize,
    pub terminal: bool,
}

impl Trajectory {
    /// Rewards r_1..r_n as they enter the learning signal.
    pub fn rewards(&self) -> Vec<f64> {
        self.steps
            .iter()
            .skip(1)
            .map(|s| s.reward)
            .chain(std::iter::once(self.final_reward))
            .collect()
    }

    /// Rewards r_1..r_n including the -1 padding for skipped steps.
    pub fn reported_rewards(&self) -> Vec<f64> {
        let mut r = self.rewards();
        r.extend(std::iter::repeat_n(-1.0, self.penalty_steps));
        r
    }

    pub fn values(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.value_estimate).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Plain sum of the reported rewards divided by the number of decisions,
    /// i.e. normalized by the best achievable return.
    pub fn normalized_return(&self) -> f64 {
        let r = self.reported_rewards();
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub value_coef: f64,
    /// 0 disables training, leaving a collection-only run.
    pub epochs_per_iter: usize,
    /// 0 means one minibatch holding the whole batch.
    pub minibatch_size: usize,
    pub normalize_advantages: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.995,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            entropy_coef: 0.0,
            learning_rate: 1e-4,
            epochs_per_iter: 5,
            value_coef: 0.5,
            minibatch_size: 100,
            normalize_advantages: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::InvalidHyperparams(m.to_owned()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return bad("lambda_gae must lie in [0, 1]");
        }
        if self.clip_eps.is_nan() || self.clip_eps <= 0.0 {
            return bad("clip_eps must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// `sum_{t=1..n} gamma^t r_t` with `rewards[0]` holding r_1, so the first
/// reward is already discounted once.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in rewards {
        discount *= gamma;
        total += discount * r;
    }
    total
}

/// Generalized advantage estimates for one trajectory.
///
/// `rewards[t]` is the reward following the action taken in state t (r_{t+1})
/// and `values[t]` is V(s_t). Returns `(advantages, value_targets)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), RlError> {
    if rewards.len() != values.len() {
        return Err(RlError::LengthMismatch { rewards: rewards.len(), values: values.len() });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

pub fn gae_advantages(traj: &Trajectory, hp: &Hyperparams) -> Result<(Vec<f64>, Vec<f64>), RlError> {
    gae(&traj.rewards(), &traj.values(), traj.bootstrap_value, hp.gamma, hp.lambda_gae)
}

/// Shift to zero mean and scale to unit population standard deviation.
/// Degenerate batches (std < 1e-8) map to zeros.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.is_empty() {
        return Vec::new();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return vec![0.0; adv.len()];
    }
    adv.iter().map(|a| (a - mean) / std).collect()
}
