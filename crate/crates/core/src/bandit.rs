//! One-element, one-step bandit with reward `1 - (a - target)^2`.
//!
//! A sanity environment for the PPO update: there are no dynamics, so the
//! optimal deterministic action is `target` regardless of the state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::policy::{Architecture, Checkpoint, PolicyError, PolicyParams};
use crate::ppo::{train_iteration, PpoError};
use crate::rl::{Hyperparams, Step, Trajectory};
use crate::sim::{FlowField, Grid};

pub const POINTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandit {
    pub target: f64,
    pub iterations: usize,
    pub episodes: usize,
}

impl Default for Bandit {
    fn default() -> Self {
        Self { target: 0.3, iterations: 200, episodes: 16 }
    }
}

impl Bandit {
    pub fn reward(&self, action: f64) -> f64 {
        1.0 - (action - self.target).powi(2)
    }

    /// The fixed observation: one element holding a random smooth field.
    pub fn state(seed: u64) -> FlowField {
        let grid = Grid::new(POINTS, 1).expect("valid bandit grid");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let u = grid.coordinates().iter().map(|x| (x + phase).sin()).collect();
        FlowField::new(grid, u, 0.0).expect("finite field")
    }

    fn episode<R: Rng>(&self, params: &PolicyParams, state: &FlowField, rng: &mut R) -> Result<Trajectory, PolicyError> {
        let dist = params.policy_forward(state)?;
        let (action, log_prob) = dist.sample(rng);
        let reward = self.reward(action[0]);
        Ok(Trajectory {
            env_id: 0,
            steps: vec![Step {
                state: state.clone(),
                action,
                log_prob,
                value_estimate: params.value_forward(state)?,
                reward: 0.0,
            }],
            final_reward: reward,
            bootstrap_value: 0.0,
            penalty_steps: 0,
            terminal: true,
        })
    }

    /// Trains a fresh policy and returns its deterministic action after every
    /// iteration.
    pub fn train(&self, hp: &Hyperparams, seed: u64) -> Result<Vec<f64>, PpoError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = Self::state(seed);
        let arch = Architecture::standard(POINTS)?;
        let mut ckpt = Checkpoint::new(PolicyParams::init(arch, &mut rng)?);
        let mut history = Vec::with_capacity(self.iterations);
        for _ in 0..self.iterations {
            let trajectories = (0..self.episodes)
                .map(|_| self.episode(&ckpt.params, &state, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            train_iteration(&mut ckpt, &trajectories, hp, &mut rng)?;
            history.push(ckpt.params.policy_forward(&state)?.deterministic()[0]);
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_peaks_at_target() {
        let b = Bandit::default();
        assert_eq!(b.reward(0.3), 1.0);
        assert!(b.reward(0.2) < 1.0 && (b.reward(0.2) - b.reward(0.4)).abs() < 1e-12);
    }

    #[test]
    fn short_run_is_deterministic() {
        let b = Bandit { iterations: 3, ..Default::default() };
        let hp = Hyperparams::default();
        assert_eq!(b.train(&hp, 5).unwrap(), b.train(&hp, 5).unwrap());
    }
}
