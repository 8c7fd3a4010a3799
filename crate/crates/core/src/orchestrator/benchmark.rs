//! Sampling-time scaling with a frozen policy.
//!
//! The sequential baseline is measured: `T_seq = n_envs * T_1`, where `T_1`
//! is the mean time to sample a single environment. Speedup is
//! `T_seq / T_n` and efficiency is speedup divided by the number of cores in
//! use. Strong mode keeps the env count fixed and varies the cores per env,
//! comparing against one core per env.

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{RunConfig, SamplerKind};
use super::launcher::available_cores;
use super::sampler::{draw_state_indices, SampleRequest};
use super::train::{Sampler, TrainError};
use crate::policy::PolicyParams;
use crate::sim::dataset::Dataset;

pub const DEFAULT_REPETITIONS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    Weak,
    Strong,
}

impl FromStr for ScalingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "weak" => Ok(ScalingMode::Weak),
            "strong" => Ok(ScalingMode::Strong),
            other => Err(format!("unknown scaling mode {other:?} (weak or strong)")),
        }
    }
}

/// One row of the benchmark CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub schema_version: u32,
    pub mode: ScalingMode,
    pub n_envs: usize,
    pub cores_per_env: usize,
    pub repetitions: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    /// Measured sequential time the row is compared against.
    pub baseline_s: f64,
    pub speedup: f64,
    pub efficiency: f64,
    pub available_cores: usize,
    pub failures: usize,
}

struct Timing {
    samples: Vec<f64>,
    failures: usize,
}

impl Timing {
    fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    fn std(&self) -> f64 {
        let m = self.mean();
        let n = self.samples.len() as f64;
        (self.samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / n).sqrt()
    }
}

fn time_sampling(
    cfg: &RunConfig,
    sampler: &Sampler,
    dataset: &Dataset,
    params: &PolicyParams,
    reps: usize,
    tag: usize,
) -> Result<Timing, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ tag as u64);
    let mut timing = Timing { samples: Vec::with_capacity(reps), failures: 0 };
    for rep in 0..reps {
        let indices = draw_state_indices(dataset, cfg.run.n_parallel_envs, &mut rng);
        let req = SampleRequest { iteration: tag * 1000 + rep, seed: cfg.run.seed, test_mode: false, deterministic: false };
        let out = sampler.sample(cfg, dataset, params, &indices, req)?;
        timing.failures += out.failures();
        timing.samples.push(out.wall_time.as_secs_f64());
    }
    Ok(timing)
}

/// Runs every configuration `reps` times; `counts` are env counts in weak
/// mode and cores per env in strong mode.
pub fn benchmark_scaling(
    cfg: &RunConfig,
    dataset: &Dataset,
    params: &PolicyParams,
    mode: ScalingMode,
    counts: &[usize],
    reps: usize,
) -> Result<Vec<ScalingRow>, TrainError> {
    let reps = reps.max(1);
    let mut base = cfg.clone();
    base.run.sampler = SamplerKind::Process;
    let sampler = Sampler::start(&base)?;
    let cores = available_cores().len();
    if cores < 8 {
        log::warn!("only {cores} cores available; parallel speedup is bounded by the core count");
    }

    let row = |n_envs: usize, cpe: usize, t: &Timing, baseline_s: f64, used: usize| {
        let speedup = baseline_s / t.mean();
        ScalingRow {
            schema_version: super::train::METRICS_SCHEMA_VERSION,
            mode,
            n_envs,
            cores_per_env: cpe,
            repetitions: t.samples.len(),
            mean_s: t.mean(),
            std_s: t.std(),
            min_s: t.samples.iter().copied().fold(f64::INFINITY, f64::min),
            max_s: t.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            baseline_s,
            speedup,
            efficiency: speedup / used as f64,
            available_cores: cores,
            failures: t.failures,
        }
    };

    let mut rows = Vec::new();
    match mode {
        ScalingMode::Weak => {
            let mut single = base.clone();
            single.run.n_parallel_envs = 1;
            single.run.cores_per_env = 1;
            let t1 = time_sampling(&single, &sampler, dataset, params, reps, 1)?;
            for &n in counts {
                let mut c = base.clone();
                c.run.n_parallel_envs = n;
                c.run.cores_per_env = 1;
                let t = if n == 1 { Timing { samples: t1.samples.clone(), failures: t1.failures } } else {
                    time_sampling(&c, &sampler, dataset, params, reps, 100 + n)?
                };
                rows.push(row(n, 1, &t, n as f64 * t1.mean(), n));
            }
        }
        ScalingMode::Strong => {
            let n = base.run.n_parallel_envs;
            let mut reference = base.clone();
            reference.run.cores_per_env = 1;
            let t1 = time_sampling(&reference, &sampler, dataset, params, reps, 2)?;
            for &cpe in counts {
                let mut c = base.clone();
                c.run.cores_per_env = cpe;
                let t = if cpe == 1 { Timing { samples: t1.samples.clone(), failures: t1.failures } } else {
                    time_sampling(&c, &sampler, dataset, params, reps, 200 + cpe)?
                };
                rows.push(row(n, cpe, &t, t1.mean(), cpe));
            }
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[ScalingRow], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!("weak".parse::<ScalingMode>().unwrap(), ScalingMode::Weak);
        assert_eq!("strong".parse::<ScalingMode>().unwrap(), ScalingMode::Strong);
        assert!("both".parse::<ScalingMode>().is_err());
    }

    #[test]
    fn timing_stats() {
        let t = Timing { samples: vec![1.0, 3.0], failures: 0 };
        assert_eq!(t.mean(), 2.0);
        assert_eq!(t.std(), 1.0);
    }
}
