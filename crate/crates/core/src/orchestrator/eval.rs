//! Hold-out evaluation of a policy against constant coefficients.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use super::config::RunConfig;
use super::sampler::{run_episode_with, EnvOutcome, EnvStatus, SampleError};
use crate::policy::{Checkpoint, PolicyError, PolicyParams};
use crate::rl::discounted_return;
use crate::sim::dataset::{Dataset, DatasetError};
use crate::sim::MAX_CS;
use crate::spectra::energy_spectrum;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("checkpoint {0} does not exist")]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("policy has {policy} points per element, grid has {grid}")]
    GridMismatch { policy: usize, grid: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSummary {
    /// Sum of rewards over decisions; 1 is the best achievable.
    pub normalized_return: f64,
    pub discounted_return: f64,
    /// Spectrum error averaged over the states after the initial one.
    pub mean_error: f64,
    pub final_error: Option<f64>,
    pub spectrum_errors: Vec<f64>,
    pub blown_up_at: Option<usize>,
    pub actions: Vec<Vec<f64>>,
    pub final_spectrum: Option<Vec<f64>>,
}

impl EpisodeSummary {
    pub fn from_outcome(o: &EnvOutcome, gamma: f64) -> Self {
        let traj = o.trajectory.as_ref();
        let errors = o.spectrum_errors.clone();
        let mean_error = if o.status == EnvStatus::Completed && !errors.is_empty() {
            errors.iter().sum::<f64>() / errors.len() as f64
        } else {
            f64::INFINITY
        };
        Self {
            normalized_return: traj.map_or(f64::NAN, |t| t.normalized_return()),
            discounted_return: traj.map_or(f64::NAN, |t| discounted_return(&t.reported_rewards(), gamma)),
            mean_error,
            final_error: o.final_state.as_ref().and(errors.last().copied()),
            spectrum_errors: errors,
            blown_up_at: match o.status {
                EnvStatus::BlownUp { step } => Some(step),
                _ => None,
            },
            actions: traj.map_or_else(Vec::new, |t| t.steps.iter().map(|s| s.action.clone()).collect()),
            final_spectrum: o.final_state.as_ref().map(|f| energy_spectrum(f).e_k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub cs: f64,
    pub summary: EpisodeSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside are clamped.
    pub fn new(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0; bins];
        for v in values {
            let b = ((v - lo) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[b] += 1;
        }
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint_iteration: u64,
    pub hold_out_index: usize,
    pub policy: EpisodeSummary,
    pub sweep: Vec<SweepPoint>,
    pub best_constant: SweepPoint,
    pub cs_histogram: Histogram,
    pub dns_spectrum: Vec<f64>,
}

impl EvalReport {
    /// The sweep entry with Cs = 0, i.e. no explicit closure.
    pub fn implicit(&self) -> &SweepPoint {
        &self.sweep[0]
    }
}

/// Deterministic policy episode on the hold-out state.
pub fn evaluate_policy(cfg: &RunConfig, dataset: &Dataset, params: &PolicyParams) -> Result<EpisodeSummary, EvalError> {
    let o = run_episode_with(cfg, dataset, params, dataset.hold_out_state(), None)?;
    Ok(EpisodeSummary::from_outcome(&o, cfg.ppo.gamma))
}

pub fn evaluate_constant(
    cfg: &RunConfig,
    dataset: &Dataset,
    params: &PolicyParams,
    cs: f64,
) -> Result<EpisodeSummary, EvalError> {
    let o = run_episode_with(cfg, dataset, params, dataset.hold_out_state(), Some(cs))?;
    Ok(EpisodeSummary::from_outcome(&o, cfg.ppo.gamma))
}

/// Cs values 0, 0.05, ..., 0.5.
pub fn sweep_values() -> Vec<f64> {
    (0..=10).map(|i| (i as f64 * 0.05).min(MAX_CS)).collect()
}

pub fn evaluate(cfg: &RunConfig, dataset: &Dataset, checkpoint: &Checkpoint) -> Result<EvalReport, EvalError> {
    let params = &checkpoint.params;
    let m = dataset.grid.points_per_element();
    if params.arch.points_per_element != m {
        return Err(EvalError::GridMismatch { policy: params.arch.points_per_element, grid: m });
    }
    let policy = evaluate_policy(cfg, dataset, params)?;
    let sweep = sweep_values()
        .into_iter()
        .map(|cs| Ok(SweepPoint { cs, summary: evaluate_constant(cfg, dataset, params, cs)? }))
        .collect::<Result<Vec<_>, EvalError>>()?;
    let best_constant = sweep
        .iter()
        .min_by(|a, b| a.summary.mean_error.total_cmp(&b.summary.mean_error))
        .cloned()
        .expect("sweep is not empty");
    let cs_histogram = Histogram::new(policy.actions.iter().flatten().copied(), 0.0, MAX_CS, 10);
    Ok(EvalReport {
        checkpoint_iteration: checkpoint.iteration,
        hold_out_index: dataset.hold_out,
        policy,
        sweep,
        best_constant,
        cs_histogram,
        dns_spectrum: dataset.mean_spectrum.e_k.clone(),
    })
}

/// Loads the dataset and checkpoint named by `cfg` and `checkpoint`.
pub fn evaluate_path(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport, EvalError> {
    if !checkpoint.is_file() {
        return Err(EvalError::MissingCheckpoint(checkpoint.to_owned()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = Dataset::load(&cfg.paths.dataset)?;
    evaluate(cfg, &dataset, &ckpt)
}
