//! Clipped-surrogate PPO over batches of complete trajectories.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::policy::{adam_step, Checkpoint, PolicyError, PolicyParams};
use crate::rl::{gae_advantages, normalize_advantages, Hyperparams, RlError, Trajectory};
use crate::sim::FlowField;

#[derive(Debug, Error, PartialEq)]
pub enum PpoError {
    #[error("non-finite loss in epoch {epoch}; parameters left unchanged")]
    NonFiniteLoss { epoch: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: FlowField,
    pub action: Vec<f64>,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub value_target: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainBatch {
    pub samples: Vec<Sample>,
}

impl TrainBatch {
    pub fn from_trajectories(trajectories: &[Trajectory], hp: &Hyperparams) -> Result<Self, PpoError> {
        let mut samples = Vec::new();
        let mut advantages = Vec::new();
        for traj in trajectories {
            let (adv, targets) = gae_advantages(traj, hp)?;
            for ((step, a), y) in traj.steps.iter().zip(adv).zip(targets) {
                advantages.push(a);
                samples.push(Sample {
                    state: step.state.clone(),
                    action: step.action.clone(),
                    old_log_prob: step.log_prob,
                    advantage: a,
                    value_target: y,
                });
            }
        }
        if hp.normalize_advantages && samples.len() >= 2 {
            for (s, a) in samples.iter_mut().zip(normalize_advantages(&advantages)) {
                s.advantage = a;
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossDiagnostics {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub theta: Vec<f64>,
    pub value: Vec<f64>,
}

/// Loss, diagnostics and gradients over `indices` of the batch.
pub fn ppo_loss_grad(
    params: &PolicyParams,
    batch: &TrainBatch,
    indices: &[usize],
    hp: &Hyperparams,
) -> Result<(LossDiagnostics, LossGradients), PpoError> {
    if indices.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let n = indices.len() as f64;
    let mut grads = LossGradients {
        theta: vec![0.0; params.theta.len()],
        value: vec![0.0; params.value_params.len()],
    };
    let mut d = LossDiagnostics::default();
    for &i in indices {
        let s = &batch.samples[i];
        let dist = params.policy_forward(&s.state)?;
        let log_prob = dist.log_prob_of(&s.action)?;
        let ratio = (log_prob - s.old_log_prob).exp();
        let clipped = ratio.clamp(1.0 - hp.clip_eps, 1.0 + hp.clip_eps);
        let a = s.advantage;
        let (surr, surr_clipped) = (ratio * a, clipped * a);
        d.policy_loss -= surr.min(surr_clipped) / n;
        if surr <= surr_clipped {
            // d(-ratio * A / n) = -(A / n) * ratio * d log_prob
            params.accumulate_log_prob_grad(&s.state, &dist, &s.action, -a * ratio / n, &mut grads.theta)?;
        }
        if (ratio - 1.0).abs() > hp.clip_eps {
            d.clip_fraction += 1.0 / n;
        }
        d.mean_ratio += ratio / n;
        d.approx_kl += ((ratio - 1.0) - (log_prob - s.old_log_prob)) / n;

        let v = params.value_forward(&s.state)?;
        let err = v - s.value_target;
        d.value_loss += err * err / n;
        params.accumulate_value_grad(&s.state, hp.value_coef * 2.0 * err / n, &mut grads.value)?;

        d.entropy += dist.gaussian_entropy() / n;
        if hp.entropy_coef != 0.0 {
            params.accumulate_entropy_grad(dist.mu.len(), -hp.entropy_coef / n, &mut grads.theta);
        }
    }
    d.loss = d.policy_loss + hp.value_coef * d.value_loss - hp.entropy_coef * d.entropy;
    Ok((d, grads))
}

pub fn ppo_loss(params: &PolicyParams, batch: &TrainBatch, hp: &Hyperparams) -> Result<LossDiagnostics, PpoError> {
    let all: Vec<usize> = (0..batch.len()).collect();
    Ok(ppo_loss_grad(params, batch, &all, hp)?.0)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainMetrics {
    pub samples: usize,
    /// Diagnostics of the last minibatch of every epoch, evaluated before its
    /// update.
    pub epochs: Vec<LossDiagnostics>,
}

impl TrainMetrics {
    pub fn last(&self) -> LossDiagnostics {
        self.epochs.last().copied().unwrap_or_default()
    }
}

/// `hp.epochs_per_iter` passes over the batch with per-epoch shuffled
/// minibatches. On a non-finite loss or gradient the trainer state is
/// restored to its value on entry.
pub fn train_iteration<R: Rng>(
    state: &mut Checkpoint,
    trajectories: &[Trajectory],
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<TrainMetrics, PpoError> {
    hp.validate()?;
    if trajectories.iter().all(|t| t.is_empty()) {
        return Err(PpoError::EmptyBatch);
    }
    let batch = TrainBatch::from_trajectories(trajectories, hp)?;
    train_on_batch(state, &batch, hp, rng)
}

pub fn train_on_batch<R: Rng>(
    state: &mut Checkpoint,
    batch: &TrainBatch,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<TrainMetrics, PpoError> {
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let saved = state.clone();
    let mb = if hp.minibatch_size == 0 { batch.len() } else { hp.minibatch_size.min(batch.len()) };
    let mut metrics = TrainMetrics { samples: batch.len(), epochs: Vec::new() };
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for epoch in 0..hp.epochs_per_iter {
        order.shuffle(rng);
        let mut last = LossDiagnostics::default();
        for chunk in order.chunks(mb) {
            let (diag, grads) = ppo_loss_grad(&state.params, batch, chunk, hp)?;
            let finite = diag.loss.is_finite() && grads.theta.iter().chain(&grads.value).all(|g| g.is_finite());
            if !finite {
                log::warn!("non-finite loss in epoch {epoch}; keeping previous parameters");
                *state = saved;
                return Err(PpoError::NonFiniteLoss { epoch });
            }
            adam_step(&mut state.params.theta, &grads.theta, &mut state.adam_policy, hp.learning_rate)?;
            adam_step(&mut state.params.value_params, &grads.value, &mut state.adam_value, hp.learning_rate)?;
            state.params.clamp_log_std();
            last = diag;
        }
        metrics.epochs.push(last);
    }
    Ok(metrics)
}
