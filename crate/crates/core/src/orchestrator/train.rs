//! The training loop: sample, update, log, evaluate, checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::config::{ConfigError, RunConfig, SamplerKind};
use super::eval::{evaluate_policy, EvalError};
use super::sampler::{
    draw_state_indices, sample_local, ProcessSampler, SampleError, SampleOutput, SampleRequest,
};
use crate::broker::{BrokerError, BrokerHandle};
use crate::policy::{Architecture, Checkpoint, PolicyError, PolicyParams};
use crate::ppo::{train_iteration, LossDiagnostics, PpoError};
use crate::rl::discounted_return;
use crate::sim::dataset::{Dataset, DatasetError};

/// Version of the column layout of `metrics.csv` and `eval.csv`.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error("iteration {iteration}: {failed} of {total} environments failed")]
    TooManyFailures { iteration: usize, failed: usize, total: usize },
    #[error("dataset grid ({dataset} points, {dataset_elements} elements) differs from the configured one")]
    GridMismatch { dataset: usize, dataset_elements: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub schema_version: u32,
    pub iteration: usize,
    pub n_envs: usize,
    pub completed: usize,
    pub blown_up: usize,
    pub failed: usize,
    /// Normalized return (mean reward per decision) over surviving envs.
    pub return_mean: f64,
    pub return_min: f64,
    pub return_max: f64,
    pub discounted_return_mean: f64,
    pub spectrum_error_mean: f64,
    pub cs_mean: f64,
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub log_std: f64,
    pub launch_s: f64,
    pub sampling_s: f64,
    pub training_s: f64,
    pub policy_forwards: usize,
    pub keys_leaked: Option<i64>,
}

/// One row of `eval.csv`: deterministic policy on the hold-out state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    pub iteration: usize,
    pub normalized_return: f64,
    pub discounted_return: f64,
    pub mean_error: f64,
    pub final_error: Option<f64>,
    pub cs_mean: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<IterationRecord>,
    pub evals: Vec<EvalRecord>,
    pub checkpoint: Checkpoint,
    pub final_checkpoint: PathBuf,
    pub output_dir: PathBuf,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn record(
    iteration: usize,
    out: &SampleOutput,
    diag: LossDiagnostics,
    params: &PolicyParams,
    gamma: f64,
    training_s: f64,
) -> IterationRecord {
    let trajs = out.trajectories();
    let returns: Vec<f64> = trajs.iter().map(|t| t.normalized_return()).collect();
    IterationRecord {
        schema_version: METRICS_SCHEMA_VERSION,
        iteration,
        n_envs: out.outcomes.len(),
        completed: trajs.len() - out.blow_ups(),
        blown_up: out.blow_ups(),
        failed: out.failures(),
        return_mean: mean(returns.iter().copied()),
        return_min: returns.iter().copied().fold(f64::INFINITY, f64::min),
        return_max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        discounted_return_mean: mean(trajs.iter().map(|t| discounted_return(&t.reported_rewards(), gamma))),
        spectrum_error_mean: mean(out.outcomes.iter().flat_map(|o| o.spectrum_errors.iter().copied())),
        cs_mean: mean(trajs.iter().flat_map(|t| t.steps.iter().flat_map(|s| s.action.iter().copied()))),
        loss: diag.loss,
        policy_loss: diag.policy_loss,
        value_loss: diag.value_loss,
        entropy: diag.entropy,
        mean_ratio: diag.mean_ratio,
        clip_fraction: diag.clip_fraction,
        approx_kl: diag.approx_kl,
        log_std: params.log_std(),
        launch_s: out.launch_time.as_secs_f64(),
        sampling_s: out.wall_time.as_secs_f64(),
        training_s,
        policy_forwards: out.policy_forwards,
        keys_leaked: out.keys_leaked,
    }
}

/// Broker plus sampler for the configured sampling mode.
pub enum Sampler {
    Local,
    Process { sampler: ProcessSampler, _broker: Option<BrokerHandle> },
}

impl Sampler {
    pub fn start(cfg: &RunConfig) -> Result<Self, TrainError> {
        Ok(match cfg.run.sampler {
            SamplerKind::Local => Sampler::Local,
            SamplerKind::Process => match &cfg.run.external_broker {
                Some(addr) => {
                    let broker = addr
                        .parse()
                        .map_err(|e| ConfigError::Invalid(format!("external_broker {addr:?}: {e}")))?;
                    Sampler::Process { sampler: ProcessSampler { broker, store: None }, _broker: None }
                }
                None => {
                    let max_conn = 2 * cfg.run.n_parallel_envs + 16;
                    let handle = BrokerHandle::spawn(&cfg.run.broker_bind, max_conn)?;
                    log::info!("broker listening on {}", handle.addr());
                    let sampler = ProcessSampler { broker: handle.addr(), store: Some(handle.store().clone()) };
                    Sampler::Process { sampler, _broker: Some(handle) }
                }
            },
        })
    }

    pub fn sample(
        &self,
        cfg: &RunConfig,
        dataset: &Dataset,
        params: &PolicyParams,
        state_indices: &[usize],
        req: SampleRequest,
    ) -> Result<SampleOutput, SampleError> {
        match self {
            Sampler::Local => sample_local(cfg, dataset, params, state_indices, req),
            Sampler::Process { sampler, .. } => sampler.sample(cfg, dataset, params, state_indices, req),
        }
    }
}

/// Loads the configured dataset and checks it against the solver grid.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, TrainError> {
    let dataset = Dataset::load(&cfg.paths.dataset)?;
    let grid = cfg.solver.grid()?;
    if dataset.grid.n_points != grid.n_points || dataset.grid.n_elements != grid.n_elements {
        return Err(TrainError::GridMismatch {
            dataset: dataset.grid.n_points,
            dataset_elements: dataset.grid.n_elements,
        });
    }
    Ok(dataset)
}

/// The checkpoint to start from: `init_checkpoint` if set, else a fresh
/// initialization drawn from `rng`.
pub fn initial_checkpoint(cfg: &RunConfig, dataset: &Dataset, rng: &mut ChaCha8Rng) -> Result<Checkpoint, TrainError> {
    let arch = Architecture::standard(dataset.grid.points_per_element())?;
    match &cfg.run.init_checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.params.arch != arch {
                return Err(PolicyError::Architecture(format!(
                    "checkpoint {} does not match the grid",
                    path.display()
                ))
                .into());
            }
            Ok(ckpt)
        }
        None => {
            let mut params = PolicyParams::init(arch, rng)?;
            // Values are expressed as fractions of the best achievable return.
            params.value_scale = discounted_return(&vec![1.0; cfg.solver.n_actions()], cfg.ppo.gamma);
            Ok(Checkpoint::new(params))
        }
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:05}.bin"))
}

pub fn train_run(cfg: &RunConfig) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut checkpoint = initial_checkpoint(cfg, &dataset, &mut rng)?;
    let out_dir = cfg.paths.output_dir.clone();
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;
    let mut metrics = csv::Writer::from_path(out_dir.join("metrics.csv"))?;
    let mut eval_csv = csv::Writer::from_path(out_dir.join("eval.csv"))?;

    let sampler = Sampler::start(cfg)?;
    let n_envs = cfg.run.n_parallel_envs;
    let mut records = Vec::with_capacity(cfg.run.iterations);
    let mut evals = Vec::new();

    for _ in 0..cfg.run.iterations {
        let iteration = checkpoint.iteration as usize;
        let indices = draw_state_indices(&dataset, n_envs, &mut rng);
        let req = SampleRequest { iteration, seed: cfg.run.seed, test_mode: false, deterministic: false };
        let out = sampler.sample(cfg, &dataset, &checkpoint.params, &indices, req)?;
        let failed = out.failures();
        if failed * 2 > n_envs {
            return Err(TrainError::TooManyFailures { iteration, failed, total: n_envs });
        }
        if let Some(leak) = out.keys_leaked.filter(|&k| k != 0) {
            log::warn!("iteration {iteration}: {leak} broker keys left behind");
        }

        let start = Instant::now();
        let trajs = out.trajectories();
        let diag = if cfg.ppo.epochs_per_iter == 0 {
            LossDiagnostics::default()
        } else {
            match train_iteration(&mut checkpoint, &trajs, &cfg.ppo, &mut rng) {
                Ok(m) => m.last(),
                Err(e @ PpoError::NonFiniteLoss { .. }) => {
                    log::warn!("iteration {iteration}: {e}");
                    LossDiagnostics { loss: f64::NAN, ..Default::default() }
                }
                Err(e) => return Err(e.into()),
            }
        };
        let rec = record(iteration, &out, diag, &checkpoint.params, cfg.ppo.gamma, start.elapsed().as_secs_f64());
        log::info!(
            "it {iteration}: return {:.4} [{:.3}, {:.3}] l {:.4} cs {:.4} failed {} sample {:.2}s",
            rec.return_mean,
            rec.return_min,
            rec.return_max,
            rec.spectrum_error_mean,
            rec.cs_mean,
            rec.failed,
            rec.sampling_s
        );
        metrics.serialize(&rec)?;
        metrics.flush()?;
        records.push(rec);
        checkpoint.iteration += 1;

        let done = checkpoint.iteration as usize;
        if cfg.run.eval_every > 0 && done % cfg.run.eval_every == 0 {
            let s = evaluate_policy(cfg, &dataset, &checkpoint.params)?;
            let e = EvalRecord {
                schema_version: METRICS_SCHEMA_VERSION,
                iteration: done,
                normalized_return: s.normalized_return,
                discounted_return: s.discounted_return,
                mean_error: s.mean_error,
                final_error: s.final_error,
                cs_mean: mean(s.actions.iter().flatten().copied()),
            };
            log::info!("eval after {done}: return {:.4} l {:.4}", e.normalized_return, e.mean_error);
            eval_csv.serialize(&e)?;
            eval_csv.flush()?;
            evals.push(e);
        }
        if cfg.run.checkpoint_every > 0 && done % cfg.run.checkpoint_every == 0 {
            checkpoint.save(&checkpoint_path(&out_dir, checkpoint.iteration))?;
        }
    }

    let final_checkpoint = out_dir.join("checkpoint-final.bin");
    checkpoint.save(&final_checkpoint)?;
    Ok(TrainSummary { records, evals, checkpoint, final_checkpoint, output_dir: out_dir })
}
