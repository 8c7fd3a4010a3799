//! Run configuration: a TOML file layered over a named preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rl::Hyperparams;
use crate::sim::dns::DnsConfig;
use crate::sim::Grid;
use crate::spectra::RewardConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown preset {0:?} (expected 24dof or 32dof)")]
    UnknownPreset(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// One worker process per environment, exchanging data via the broker.
    Process,
    /// Environments stepped inside the orchestrator; no broker, no processes.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub preset: String,
    pub run_id: String,
    pub n_parallel_envs: usize,
    pub cores_per_env: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Hold-out evaluation cadence in iterations (0 disables).
    pub eval_every: usize,
    /// Checkpoint cadence in iterations (0 keeps only the final one).
    pub checkpoint_every: usize,
    pub sampler: SamplerKind,
    /// Bind address of the in-process broker.
    pub broker_bind: String,
    /// Use an already running broker instead of starting one.
    pub external_broker: Option<String>,
    /// Address workers connect to; filled in by the launcher.
    pub broker_address: Option<String>,
    /// Initial checkpoint to continue from.
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub n_points: usize,
    pub n_elements: usize,
    pub t_end: f64,
    pub dt_rl: f64,
    pub dealias: bool,
}

impl SolverSection {
    pub fn grid(&self) -> Result<Grid, ConfigError> {
        Grid::new(self.n_points, self.n_elements).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Number of agent decisions per episode.
    pub fn n_actions(&self) -> usize {
        (self.t_end / self.dt_rl).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInjection {
    pub iteration: usize,
    pub env: usize,
    /// The worker exits abnormally when it reaches this step.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LauncherSection {
    /// Worker executable; defaults to `env-worker` next to the running binary.
    pub worker_binary: Option<PathBuf>,
    pub pinning: bool,
    pub stagger_ms: u64,
    pub poll_interval_ms: u64,
    pub poll_timeout_ms: u64,
    /// Root of the per-worker staging directories; defaults to `/dev/shm`
    /// when present, else the system temp directory.
    pub scratch_dir: Option<PathBuf>,
    pub fault: Option<FaultInjection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
}

// `flatten` rules out `deny_unknown_fields` here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnsSection {
    #[serde(flatten)]
    pub config: DnsConfig,
    pub n_snapshots: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub solver: SolverSection,
    pub reward: RewardConfig,
    pub ppo: Hyperparams,
    pub launcher: LauncherSection,
    pub paths: PathsSection,
    pub dns: DnsSection,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (n_points, k_max, alpha) = match name {
            "24dof" => (24, 9, 0.4),
            "32dof" => (32, 12, 0.2),
            other => return Err(ConfigError::UnknownPreset(other.to_owned())),
        };
        Ok(Self {
            run: RunSection {
                preset: name.to_owned(),
                run_id: format!("rlx-{name}"),
                n_parallel_envs: 16,
                cores_per_env: 1,
                iterations: 300,
                seed: 1,
                eval_every: 10,
                checkpoint_every: 50,
                sampler: SamplerKind::Process,
                broker_bind: "127.0.0.1:0".into(),
                external_broker: None,
                broker_address: None,
                init_checkpoint: None,
            },
            solver: SolverSection { n_points, n_elements: 4, t_end: 5.0, dt_rl: 0.1, dealias: true },
            reward: RewardConfig { k_max, alpha, literal: false },
            ppo: Hyperparams::default(),
            launcher: LauncherSection {
                worker_binary: None,
                pinning: false,
                stagger_ms: 0,
                poll_interval_ms: 5,
                poll_timeout_ms: 60_000,
                scratch_dir: None,
                fault: None,
            },
            paths: PathsSection {
                dataset: PathBuf::from(format!("data/dns-{name}.bin")),
                output_dir: PathBuf::from(format!("runs/{name}")),
            },
            dns: DnsSection { config: DnsConfig::default(), n_snapshots: 12, seed: 1 },
        })
    }

    /// Parses TOML text; `run.preset` (default `24dof`) supplies every field
    /// the text leaves out.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let preset = user
            .get("run")
            .and_then(|r| r.get("preset"))
            .and_then(|p| p.as_str())
            .unwrap_or("24dof");
        let base = Self::preset(preset)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.run.n_parallel_envs < 1 {
            return bad("n_parallel_envs must be at least 1".into());
        }
        if self.run.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if self.run.cores_per_env < 1 {
            return bad("cores_per_env must be at least 1".into());
        }
        let grid = self.solver.grid()?;
        let s = &self.solver;
        if !(s.dt_rl > 0.0 && s.t_end > 0.0) {
            return bad("t_end and dt_rl must be positive".into());
        }
        let n = s.t_end / s.dt_rl;
        if (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
            return bad(format!("t_end / dt_rl = {n} is not a positive integer"));
        }
        self.reward.validate(grid.nyquist()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ppo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.launcher.poll_interval_ms == 0 {
            return bad("poll_interval_ms must be positive".into());
        }
        Ok(())
    }

    pub fn scratch_root(&self) -> PathBuf {
        if let Some(dir) = &self.launcher.scratch_dir {
            return dir.clone();
        }
        let shm = Path::new("/dev/shm");
        if shm.is_dir() {
            shm.to_path_buf()
        } else {
            std::env::temp_dir()
        }
    }
}

/// Recursively overlays `over` onto `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let a = RunConfig::preset("24dof").unwrap();
        assert_eq!((a.solver.n_points, a.reward.k_max, a.reward.alpha), (24, 9, 0.4));
        assert_eq!(a.solver.n_actions(), 50);
        let b = RunConfig::preset("32dof").unwrap();
        assert_eq!((b.solver.n_points, b.reward.k_max, b.reward.alpha), (32, 12, 0.2));
        assert!(RunConfig::preset("64dof").is_err());
        a.validate().unwrap();
        b.validate().unwrap();
    }

    #[test]
    fn overlay_and_round_trip() {
        let cfg = RunConfig::from_toml_str(
            r#"
            [run]
            preset = "32dof"
            n_parallel_envs = 4
            [ppo]
            learning_rate = 0.001
            [launcher]
            fault = { iteration = 0, env = 1, step = 3 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.solver.n_points, 32);
        assert_eq!(cfg.run.n_parallel_envs, 4);
        assert_eq!(cfg.ppo.learning_rate, 0.001);
        assert_eq!(cfg.ppo.gamma, 0.995);
        assert_eq!(cfg.launcher.fault.unwrap().step, 3);
        let again = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::from_toml_str("[run]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[solver]\ndt_rl = 0.3").is_err());
        assert!(RunConfig::from_toml_str("[reward]\nk_max = 40").is_err());
        assert!(RunConfig::from_toml_str("[run]\nn_parallel_envs = 0").is_err());
        assert!(RunConfig::from_toml_str("not toml [").is_err());
    }
}
