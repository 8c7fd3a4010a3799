//! Spawns one worker process per environment, each with its own staged
//! scratch directory and, optionally, a disjoint set of CPU cores.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::config::RunConfig;

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("cannot prepare scratch directory {path}: {source}")]
    Scratch { path: PathBuf, source: std::io::Error },
    #[error("worker executable not found (looked for {0})")]
    MissingWorker(PathBuf),
}

pub struct WorkerProcess {
    pub env_id: usize,
    pub state_index: usize,
    pub cores: Vec<usize>,
    /// `Err` holds the reason the spawn failed.
    pub child: Result<Child, String>,
}

pub struct Batch {
    pub run_id: String,
    pub workers: Vec<WorkerProcess>,
    pub launch_time: Duration,
    scratch: PathBuf,
}

impl Batch {
    pub fn scratch_dir(&self) -> &Path {
        &self.scratch
    }

    pub fn spawn_failures(&self) -> usize {
        self.workers.iter().filter(|w| w.child.is_err()).count()
    }
}

impl Drop for Batch {
    fn drop(&mut self) {
        for w in &mut self.workers {
            if let Ok(child) = &mut w.child {
                if matches!(child.try_wait(), Ok(None)) {
                    let _ = child.kill();
                    let _ = child.wait();
                }
            }
        }
        if let Err(e) = fs::remove_dir_all(&self.scratch) {
            if e.kind() != std::io::ErrorKind::NotFound {
                log::warn!("could not remove {}: {e}", self.scratch.display());
            }
        }
    }
}

/// Cores usable by this process, in ascending order.
pub fn available_cores() -> Vec<usize> {
    // SAFETY: `set` is a plain bitmask that sched_getaffinity fills in.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) == 0 {
            let cores: Vec<usize> = (0..libc::CPU_SETSIZE as usize).filter(|&c| libc::CPU_ISSET(c, &set)).collect();
            if !cores.is_empty() {
                return cores;
            }
        }
    }
    let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    (0..n).collect()
}

/// Splits `cores` into `n_envs` consecutive groups of `per_env`. When there
/// are not enough cores the assignment wraps around and groups overlap.
pub fn core_sets(n_envs: usize, per_env: usize, cores: &[usize]) -> Vec<Vec<usize>> {
    if cores.is_empty() {
        return vec![Vec::new(); n_envs];
    }
    (0..n_envs)
        .map(|e| (0..per_env).map(|j| cores[(e * per_env + j) % cores.len()]).collect())
        .collect()
}

fn pin_to(cmd: &mut Command, cores: Vec<usize>) {
    use std::os::unix::process::CommandExt;
    // SAFETY: the closure only builds a cpu_set_t on the stack and calls
    // sched_setaffinity, both async-signal-safe.
    unsafe {
        cmd.pre_exec(move || {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            for &c in &cores {
                libc::CPU_SET(c, &mut set);
            }
            if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
}

pub fn worker_binary(cfg: &RunConfig) -> Result<PathBuf, LaunchError> {
    if let Some(p) = &cfg.launcher.worker_binary {
        return if p.is_file() { Ok(p.clone()) } else { Err(LaunchError::MissingWorker(p.clone())) };
    }
    let exe = std::env::current_exe().map_err(|_| LaunchError::MissingWorker("env-worker".into()))?;
    let mut dir = exe.parent();
    // Test binaries live one level below the other executables.
    for _ in 0..2 {
        let Some(d) = dir else { break };
        let candidate = d.join("env-worker");
        if candidate.is_file() {
            return Ok(candidate);
        }
        dir = d.parent();
    }
    Err(LaunchError::MissingWorker(exe.with_file_name("env-worker")))
}

/// Writes the per-worker copy of the dataset and configuration.
fn stage(dir: &Path, cfg: &RunConfig, broker: &str, run_id: &str) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let dataset = dir.join("dataset.bin");
    fs::copy(&cfg.paths.dataset, &dataset)?;
    let mut staged = cfg.clone();
    staged.paths.dataset = dataset;
    staged.run.run_id = run_id.to_owned();
    staged.run.broker_address = Some(broker.to_owned());
    let config = dir.join("config.toml");
    fs::write(&config, staged.to_toml_string())?;
    Ok(config)
}

/// Stages and spawns the workers of one iteration back to back.
pub fn launch_batch(
    cfg: &RunConfig,
    iteration: usize,
    state_indices: &[usize],
    broker: &str,
    test_mode: bool,
) -> Result<Batch, LaunchError> {
    let binary = worker_binary(cfg)?;
    let run_id = format!("{}.it{iteration}", cfg.run.run_id);
    let scratch = cfg
        .scratch_root()
        .join(format!("rlx-{}-{}-it{iteration}", std::process::id(), sanitize(&cfg.run.run_id)));
    let scratch_err = |source| LaunchError::Scratch { path: scratch.clone(), source };
    fs::create_dir_all(&scratch).map_err(scratch_err)?;

    let sets = if cfg.launcher.pinning {
        let cores = available_cores();
        let needed = state_indices.len() * cfg.run.cores_per_env;
        if needed > cores.len() {
            log::warn!("pinning {needed} cores onto {} available; core sets overlap", cores.len());
        }
        core_sets(state_indices.len(), cfg.run.cores_per_env, &cores)
    } else {
        vec![Vec::new(); state_indices.len()]
    };

    let start = Instant::now();
    let mut workers = Vec::with_capacity(state_indices.len());
    let mut batch_partial = Batch { run_id: run_id.clone(), workers: Vec::new(), launch_time: Duration::ZERO, scratch };
    for (env_id, (&state_index, cores)) in state_indices.iter().zip(sets).enumerate() {
        if env_id > 0 && cfg.launcher.stagger_ms > 0 {
            std::thread::sleep(Duration::from_millis(cfg.launcher.stagger_ms));
        }
        let dir = batch_partial.scratch.join(format!("env{env_id}"));
        let child = match stage(&dir, cfg, broker, &run_id) {
            Err(e) => Err(format!("staging failed: {e}")),
            Ok(config) => {
                let mut cmd = Command::new(&binary);
                cmd.arg("--config")
                    .arg(&config)
                    .arg("--env-id")
                    .arg(env_id.to_string())
                    .arg("--state-index")
                    .arg(state_index.to_string())
                    .current_dir(&dir)
                    .stdin(Stdio::null());
                if test_mode {
                    cmd.arg("--test");
                }
                if let Some(f) = cfg.launcher.fault {
                    if f.iteration == iteration && f.env == env_id {
                        cmd.arg("--fault-exit-at").arg(f.step.to_string());
                    }
                }
                if !cores.is_empty() {
                    pin_to(&mut cmd, cores.clone());
                }
                cmd.spawn().map_err(|e| format!("spawn failed: {e}"))
            }
        };
        if let Err(reason) = &child {
            log::warn!("env {env_id}: {reason}");
        }
        workers.push(WorkerProcess { env_id, state_index, cores, child });
    }
    batch_partial.launch_time = start.elapsed();
    batch_partial.workers = workers;
    Ok(batch_partial)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}
