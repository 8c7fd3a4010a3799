//! Experience collection: one collector per environment turns observed
//! states into actions and, at the end, into a trajectory.

use std::io;
use std::net::SocketAddr;
use std::process::Child;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::config::RunConfig;
use super::launcher::{launch_batch, LaunchError};
use crate::broker::{Client, ClientError, Store};
use crate::policy::{PolicyError, PolicyParams};
use crate::rl::{Step, Trajectory};
use crate::sim::dataset::{Dataset, DatasetError};
use crate::sim::{FlowField, SimError};
use crate::spectra::{EnergySpectrum, RewardConfig, SpectraError};
use crate::wire::Tensor;
use crate::worker::{action_key, done_key, state_key, LesEpisode, DONE_BLOW_UP};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error(transparent)]
    Launch(#[from] LaunchError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("broker: {0}")]
    Broker(#[from] ClientError),
    #[error("state {got} arrived while expecting {expected}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("{0}")]
    Worker(String),
}

/// Everything a collector needs besides its RNG.
pub struct EpisodeContext<'a> {
    pub params: &'a PolicyParams,
    pub reference: &'a EnergySpectrum,
    pub reward: RewardConfig,
    pub gamma: f64,
    pub n_actions: usize,
    pub dt_rl: f64,
    /// Act with the squashed mean instead of sampling.
    pub deterministic: bool,
    pub forwards: &'a AtomicUsize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvStatus {
    Completed,
    /// The solution diverged while advancing to `step`.
    BlownUp { step: usize },
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct EnvOutcome {
    pub env_id: usize,
    pub state_index: usize,
    pub status: EnvStatus,
    pub trajectory: Option<Trajectory>,
    /// Spectrum error of every state after the initial one.
    pub spectrum_errors: Vec<f64>,
    pub final_state: Option<FlowField>,
    pub exit_code: Option<i32>,
}

impl EnvOutcome {
    fn failed(env_id: usize, state_index: usize, reason: String) -> Self {
        Self {
            env_id,
            state_index,
            status: EnvStatus::Failed(reason),
            trajectory: None,
            spectrum_errors: Vec::new(),
            final_state: None,
            exit_code: None,
        }
    }
}

/// Agent side of one episode.
pub struct Collector<'a> {
    ctx: &'a EpisodeContext<'a>,
    env_id: usize,
    state_index: usize,
    rng: ChaCha8Rng,
    steps: Vec<Step>,
    errors: Vec<f64>,
    final_reward: Option<f64>,
    final_state: Option<FlowField>,
    /// Replaces the policy by a fixed coefficient on every element.
    constant: Option<f64>,
}

impl<'a> Collector<'a> {
    pub fn new(ctx: &'a EpisodeContext<'a>, env_id: usize, state_index: usize, rng: ChaCha8Rng) -> Self {
        Self {
            ctx,
            env_id,
            state_index,
            rng,
            steps: Vec::with_capacity(ctx.n_actions),
            errors: Vec::with_capacity(ctx.n_actions),
            final_reward: None,
            final_state: None,
            constant: None,
        }
    }

    /// Consumes state `t`; returns the action to apply, or `None` once the
    /// final state has been seen.
    pub fn observe(&mut self, t: usize, mut state: FlowField) -> Result<Option<Vec<f64>>, SampleError> {
        if t != self.steps.len() || self.final_reward.is_some() {
            return Err(SampleError::OutOfOrder { expected: self.steps.len(), got: t });
        }
        state.time = t as f64 * self.ctx.dt_rl;
        let reward = if t > 0 {
            let (l, r) = self.ctx.reward.evaluate(&state, self.ctx.reference)?;
            self.errors.push(l);
            r
        } else {
            0.0
        };
        if t == self.ctx.n_actions {
            self.final_reward = Some(reward);
            self.final_state = Some(state);
            return Ok(None);
        }
        if let Some(cs) = self.constant {
            let action = vec![cs; state.grid.n_elements];
            self.steps.push(Step { state, action: action.clone(), log_prob: 0.0, value_estimate: 0.0, reward });
            return Ok(Some(action));
        }
        let dist = self.ctx.params.policy_forward(&state)?;
        self.ctx.forwards.fetch_add(1, Ordering::Relaxed);
        let (action, log_prob) = if self.ctx.deterministic {
            let a = dist.deterministic();
            let lp = dist.log_prob_of(&a)?;
            (a, lp)
        } else {
            dist.sample(&mut self.rng)
        };
        let value_estimate = self.ctx.params.value_forward(&state)?;
        self.steps.push(Step { state, action: action.clone(), log_prob, value_estimate, reward });
        Ok(Some(action))
    }

    pub fn finish(self) -> EnvOutcome {
        let traj = Trajectory {
            env_id: self.env_id,
            steps: self.steps,
            final_reward: self.final_reward.unwrap_or(0.0),
            bootstrap_value: 0.0,
            penalty_steps: 0,
            terminal: true,
        };
        EnvOutcome {
            env_id: self.env_id,
            state_index: self.state_index,
            status: EnvStatus::Completed,
            trajectory: Some(traj),
            spectrum_errors: self.errors,
            final_state: self.final_state,
            exit_code: None,
        }
    }

    /// Closes the episode after a divergence while advancing to `step`. The
    /// diverging transition earns -1 and so does every step that never ran;
    /// the latter enter the learning signal as a discounted bootstrap value.
    pub fn blown_up(self, step: usize) -> EnvOutcome {
        let skipped = self.ctx.n_actions.saturating_sub(step);
        let mut bootstrap = 0.0;
        let mut discount = 1.0;
        for _ in 0..skipped {
            bootstrap -= discount;
            discount *= self.ctx.gamma;
        }
        let traj = Trajectory {
            env_id: self.env_id,
            steps: self.steps,
            final_reward: -1.0,
            bootstrap_value: bootstrap,
            penalty_steps: skipped,
            terminal: true,
        };
        EnvOutcome {
            env_id: self.env_id,
            state_index: self.state_index,
            status: EnvStatus::BlownUp { step },
            trajectory: Some(traj),
            spectrum_errors: self.errors,
            final_state: None,
            exit_code: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SampleRequest {
    pub iteration: usize,
    pub seed: u64,
    pub test_mode: bool,
    pub deterministic: bool,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub outcomes: Vec<EnvOutcome>,
    pub policy_forwards: usize,
    pub launch_time: Duration,
    pub wall_time: Duration,
    /// Broker keys added and not removed by the iteration, when the store is
    /// observable.
    pub keys_leaked: Option<i64>,
}

impl SampleOutput {
    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.outcomes.iter().filter_map(|o| o.trajectory.clone()).collect()
    }

    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| matches!(o.status, EnvStatus::Failed(_))).count()
    }

    pub fn blow_ups(&self) -> usize {
        self.outcomes.iter().filter(|o| matches!(o.status, EnvStatus::BlownUp { .. })).count()
    }

    /// Decisions recorded over all surviving environments.
    pub fn recorded_steps(&self) -> usize {
        self.outcomes.iter().filter_map(|o| o.trajectory.as_ref()).map(|t| t.len()).sum()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for environment `env` of `iteration`.
pub fn env_rng(seed: u64, iteration: usize, env: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(iteration as u64)));
    rng.set_stream(env as u64 + 1);
    rng
}

/// Initial-state indices for `n_envs` environments, drawn uniformly with
/// replacement from the training snapshots.
pub fn draw_state_indices<R: Rng>(dataset: &Dataset, n_envs: usize, rng: &mut R) -> Vec<usize> {
    let pool = dataset.training_indices();
    (0..n_envs).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

fn context<'a>(
    cfg: &RunConfig,
    dataset: &'a Dataset,
    params: &'a PolicyParams,
    deterministic: bool,
    forwards: &'a AtomicUsize,
) -> EpisodeContext<'a> {
    EpisodeContext {
        params,
        reference: &dataset.mean_spectrum,
        reward: cfg.reward,
        gamma: cfg.ppo.gamma,
        n_actions: cfg.solver.n_actions(),
        dt_rl: cfg.solver.dt_rl,
        deterministic,
        forwards,
    }
}

/// Runs one episode per entry of `state_indices` on threads of this process.
pub fn sample_local(
    cfg: &RunConfig,
    dataset: &Dataset,
    params: &PolicyParams,
    state_indices: &[usize],
    req: SampleRequest,
) -> Result<SampleOutput, SampleError> {
    let start = Instant::now();
    let forwards = AtomicUsize::new(0);
    let ctx = context(cfg, dataset, params, req.deterministic, &forwards);
    let outcomes = std::thread::scope(|s| {
        let handles: Vec<_> = state_indices
            .iter()
            .enumerate()
            .map(|(env, &idx)| {
                let ctx = &ctx;
                s.spawn(move || {
                    let collector = Collector::new(ctx, env, idx, env_rng(req.seed, req.iteration, env));
                    run_local(cfg, dataset, collector, idx, req.test_mode)
                        .unwrap_or_else(|e| EnvOutcome::failed(env, idx, e.to_string()))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("collector thread panicked")).collect()
    });
    Ok(SampleOutput {
        outcomes,
        policy_forwards: forwards.load(Ordering::Relaxed),
        launch_time: Duration::ZERO,
        wall_time: start.elapsed(),
        keys_leaked: None,
    })
}

fn run_local(
    cfg: &RunConfig,
    dataset: &Dataset,
    mut collector: Collector<'_>,
    idx: usize,
    test_mode: bool,
) -> Result<EnvOutcome, SampleError> {
    let initial = dataset.initial_state(idx, test_mode)?;
    run_from(cfg, dataset, &mut collector, initial).map(|end| match end {
        None => collector.finish(),
        Some(step) => collector.blown_up(step),
    })
}

/// Steps an in-process episode; returns the blow-up step, if any.
fn run_from(
    cfg: &RunConfig,
    dataset: &Dataset,
    collector: &mut Collector<'_>,
    initial: FlowField,
) -> Result<Option<usize>, SampleError> {
    let mut episode =
        LesEpisode::new(initial, dataset.viscosity, dataset.forcing, cfg.solver.dt_rl, cfg.solver.dealias)?;
    let mut t = 0;
    while let Some(action) = collector.observe(t, episode.state().clone())? {
        match episode.apply(&action) {
            Ok(_) => t += 1,
            Err(SimError::BlowUp { .. }) => return Ok(Some(t + 1)),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(None)
}

/// Deterministic in-process episode from an explicit initial state, acting
/// with `policy` if given and else holding `constant` on every element.
pub fn run_episode_with(
    cfg: &RunConfig,
    dataset: &Dataset,
    params: &PolicyParams,
    initial: FlowField,
    constant: Option<f64>,
) -> Result<EnvOutcome, SampleError> {
    let forwards = AtomicUsize::new(0);
    let ctx = context(cfg, dataset, params, true, &forwards);
    let mut collector = Collector::new(&ctx, 0, dataset.hold_out, env_rng(0, 0, 0));
    collector.constant = constant;
    let end = run_from(cfg, dataset, &mut collector, initial)?;
    Ok(match end {
        None => collector.finish(),
        Some(step) => collector.blown_up(step),
    })
}

/// Collects experience from worker processes through a broker.
pub struct ProcessSampler {
    pub broker: SocketAddr,
    /// Store of an in-process broker, used for the key-hygiene count.
    pub store: Option<Arc<Store>>,
}

impl ProcessSampler {
    pub fn sample(
        &self,
        cfg: &RunConfig,
        dataset: &Dataset,
        params: &PolicyParams,
        state_indices: &[usize],
        req: SampleRequest,
    ) -> Result<SampleOutput, SampleError> {
        let start = Instant::now();
        let keys_before = self.store.as_ref().map(|s| s.len() as i64);
        let mut batch = launch_batch(cfg, req.iteration, state_indices, &self.broker.to_string(), req.test_mode)?;
        let launch_time = batch.launch_time;
        let run_id = batch.run_id.clone();
        let children: Vec<Result<Mutex<Child>, String>> = batch
            .workers
            .iter_mut()
            .map(|w| std::mem::replace(&mut w.child, Err("moved".into())).map(Mutex::new))
            .collect();

        let forwards = AtomicUsize::new(0);
        let ctx = context(cfg, dataset, params, req.deterministic, &forwards);
        let link = Link {
            broker: self.broker,
            run_id: &run_id,
            interval: Duration::from_millis(cfg.launcher.poll_interval_ms),
            timeout: Duration::from_millis(cfg.launcher.poll_timeout_ms),
            grid: dataset.grid,
        };

        let mut outcomes: Vec<EnvOutcome> = std::thread::scope(|s| {
            let handles: Vec<_> = state_indices
                .iter()
                .zip(&children)
                .enumerate()
                .map(|(env, (&idx, child))| {
                    let (ctx, link) = (&ctx, &link);
                    s.spawn(move || {
                        let child = match child {
                            Ok(c) => c,
                            Err(reason) => return EnvOutcome::failed(env, idx, reason.clone()),
                        };
                        let collector = Collector::new(ctx, env, idx, env_rng(req.seed, req.iteration, env));
                        match link.collect(env, collector, child) {
                            Ok(o) => o,
                            Err(e) => {
                                if let Ok(mut c) = child.lock() {
                                    let _ = c.kill();
                                }
                                link.sweep(env, ctx.n_actions);
                                log::warn!("env {env}: {e}");
                                EnvOutcome::failed(env, idx, e.to_string())
                            }
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("collector thread panicked")).collect()
        });

        // Barrier: every worker has exited before training starts.
        for (o, child) in outcomes.iter_mut().zip(children) {
            if let Ok(c) = child {
                let mut c = c.into_inner().unwrap_or_else(|p| p.into_inner());
                o.exit_code = c.wait().ok().and_then(|s| s.code());
            }
        }
        drop(batch);
        Ok(SampleOutput {
            outcomes,
            policy_forwards: forwards.load(Ordering::Relaxed),
            launch_time,
            wall_time: start.elapsed(),
            keys_leaked: keys_before.zip(self.store.as_ref()).map(|(b, s)| s.len() as i64 - b),
        })
    }
}

struct Link<'a> {
    broker: SocketAddr,
    run_id: &'a str,
    interval: Duration,
    timeout: Duration,
    grid: crate::sim::Grid,
}

impl Link<'_> {
    fn collect(&self, env: usize, mut collector: Collector<'_>, child: &Mutex<Child>) -> Result<EnvOutcome, SampleError> {
        let mut client = Client::connect_timeout(&self.broker, self.timeout)?;
        for t in 0.. {
            let key = done_key(self.run_id, env, t);
            let mut exited = None;
            let polled = client.poll_with(&key, self.interval, self.timeout, || {
                if let Ok(Some(status)) = child.lock().expect("child lock").try_wait() {
                    exited = Some(status);
                    return Err(ClientError::ConnectionLost(io::Error::other("worker exited")));
                }
                Ok(())
            });
            let flag = match (polled, exited) {
                (Ok(tensor), _) => tensor,
                // The worker may have written its last keys just before exiting.
                (Err(_), Some(status)) => client.get(&key)?.ok_or_else(|| {
                    SampleError::Worker(format!("worker exited ({status}) before publishing step {t}"))
                })?,
                (Err(e), None) => return Err(e.into()),
            };
            let flag = flag.to_u8().map_err(|e| SampleError::Worker(e.to_string()))?;
            client.delete(&key)?;
            if t > 0 {
                client.delete(&action_key(self.run_id, env, t - 1))?;
            }
            if flag.first() == Some(&DONE_BLOW_UP) {
                return Ok(collector.blown_up(t));
            }
            let skey = state_key(self.run_id, env, t);
            let state = client
                .get(&skey)?
                .ok_or_else(|| SampleError::Worker(format!("done flag without state at step {t}")))?;
            client.delete(&skey)?;
            let u = state.to_f64().map_err(|e| SampleError::Worker(e.to_string()))?;
            let field = FlowField::new(self.grid, u, 0.0)?;
            match collector.observe(t, field)? {
                Some(action) => client.put(&action_key(self.run_id, env, t), Tensor::vector_f64(&action))?,
                None => break,
            }
        }
        Ok(collector.finish())
    }

    /// Removes every key an environment may have left behind.
    fn sweep(&self, env: usize, n_actions: usize) {
        let Ok(mut client) = Client::connect_timeout(&self.broker, self.timeout) else {
            log::warn!("env {env}: cannot reach broker to remove leftover keys");
            return;
        };
        for t in 0..=n_actions + 1 {
            for key in [state_key(self.run_id, env, t), done_key(self.run_id, env, t), action_key(self.run_id, env, t)] {
                let _ = client.delete(&key);
            }
        }
    }
}
