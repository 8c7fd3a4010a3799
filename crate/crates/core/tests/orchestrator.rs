use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlx::broker::BrokerHandle;
use rlx::orchestrator::config::FaultInjection;
use rlx::orchestrator::sampler::{sample_local, EnvStatus, ProcessSampler, SampleRequest};
use rlx::orchestrator::{train_run, RunConfig, SamplerKind, TrainError};
use rlx::policy::{Architecture, Checkpoint, PolicyParams};
use rlx::sim::dataset::Dataset;
use rlx::sim::{FlowField, Grid};
use rlx::spectra::energy_spectrum;
use rlx::worker::{EXIT_BLOW_UP, EXIT_SETUP, EXIT_TIMEOUT};

fn dataset(viscosity: f64, forcing: f64) -> Dataset {
    let grid = Grid::new(24, 4).unwrap();
    let snapshots: Vec<FlowField> = (0..4)
        .map(|i| FlowField::from_fn(grid, |x| 0.4 * (x + i as f64).sin() + 0.15 * (4.0 * x - i as f64).cos()))
        .collect();
    let mean_spectrum = energy_spectrum(&snapshots[1]);
    Dataset { grid, dns_points: 24, viscosity, forcing, seed: 0, snapshots, hold_out: 3, mean_spectrum }
}

fn config(dir: &Path, ds: &Dataset) -> RunConfig {
    let path = dir.join("ds.bin");
    ds.save(&path).unwrap();
    let mut cfg = RunConfig::preset("24dof").unwrap();
    cfg.paths.dataset = path;
    cfg.paths.output_dir = dir.join("out");
    cfg.solver.t_end = 1.0;
    cfg.run.n_parallel_envs = 3;
    cfg.run.run_id = format!("t{}", std::process::id());
    cfg.launcher.worker_binary = Some(PathBuf::from(env!("CARGO_BIN_EXE_env-worker")));
    cfg.launcher.scratch_dir = Some(dir.join("scratch"));
    cfg.launcher.poll_interval_ms = 1;
    cfg.launcher.poll_timeout_ms = 20_000;
    cfg
}

fn params() -> PolicyParams {
    PolicyParams::init(Architecture::standard(6).unwrap(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
}

fn req(iteration: usize) -> SampleRequest {
    SampleRequest { iteration, seed: 11, test_mode: false, deterministic: false }
}

#[test]
fn process_trajectory_equals_in_process_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(0.005, 0.3);
    let cfg = config(dir.path(), &ds);
    let broker = BrokerHandle::spawn("127.0.0.1:0", 64).unwrap();
    let sampler = ProcessSampler { broker: broker.addr(), store: Some(broker.store().clone()) };
    let p = params();
    let remote = sampler.sample(&cfg, &ds, &p, &[1], req(0)).unwrap();
    let local = sample_local(&cfg, &ds, &p, &[1], req(0)).unwrap();
    assert_eq!(remote.failures(), 0);
    assert_eq!(remote.trajectories(), local.trajectories());
    assert_eq!(remote.outcomes[0].spectrum_errors, local.outcomes[0].spectrum_errors);
    assert_eq!(remote.keys_leaked, Some(0));
    assert_eq!(remote.outcomes[0].exit_code, Some(0));
}

#[test]
fn batch_invariants_and_crash_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(0.005, 0.3);
    let mut cfg = config(dir.path(), &ds);
    cfg.run.n_parallel_envs = 4;
    let broker = BrokerHandle::spawn("127.0.0.1:0", 64).unwrap();
    let sampler = ProcessSampler { broker: broker.addr(), store: Some(broker.store().clone()) };
    let p = params();
    let indices = [0, 1, 2, 0];

    let clean = sampler.sample(&cfg, &ds, &p, &indices, req(3)).unwrap();
    assert_eq!(clean.failures(), 0);
    // One policy forward per env per decision.
    assert_eq!(clean.policy_forwards, 4 * 10);
    assert_eq!(clean.keys_leaked, Some(0));
    // Barrier: every worker has been reaped with a status.
    assert!(clean.outcomes.iter().all(|o| o.exit_code == Some(0)));
    assert!(!dir.path().join("scratch").read_dir().unwrap().any(|_| true), "scratch left behind");

    cfg.launcher.fault = Some(FaultInjection { iteration: 3, env: 1, step: 4 });
    let faulty = sampler.sample(&cfg, &ds, &p, &indices, req(3)).unwrap();
    assert_eq!(faulty.failures(), 1);
    assert!(matches!(faulty.outcomes[1].status, EnvStatus::Failed(_)));
    assert_eq!(faulty.outcomes[1].exit_code, Some(101));
    assert_eq!(faulty.trajectories().len(), 3);
    for env in [0, 2, 3] {
        assert_eq!(faulty.outcomes[env].trajectory, clean.outcomes[env].trajectory, "env {env} perturbed");
    }
    assert_eq!(faulty.keys_leaked, Some(0));
    assert_eq!(broker.store().len(), 0);
}

#[test]
fn blow_up_is_a_terminal_penalty() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(0.0, 400.0);
    let cfg = config(dir.path(), &ds);
    let broker = BrokerHandle::spawn("127.0.0.1:0", 64).unwrap();
    let sampler = ProcessSampler { broker: broker.addr(), store: Some(broker.store().clone()) };
    let out = sampler.sample(&cfg, &ds, &params(), &[0], req(0)).unwrap();
    let o = &out.outcomes[0];
    let EnvStatus::BlownUp { step } = o.status else { panic!("expected blow-up, got {:?}", o.status) };
    assert_eq!(o.exit_code, Some(EXIT_BLOW_UP));
    let traj = o.trajectory.as_ref().unwrap();
    assert_eq!(traj.len(), step);
    assert_eq!(traj.reported_rewards().len(), 10);
    assert_eq!(out.keys_leaked, Some(0));
    let local = sample_local(&cfg, &ds, &params(), &[0], req(0)).unwrap();
    assert_eq!(local.outcomes[0].status, o.status);
}

#[test]
fn majority_failure_aborts_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(0.005, 0.3);
    let mut cfg = config(dir.path(), &ds);
    cfg.launcher.worker_binary = Some(PathBuf::from("/bin/false"));
    let err = train_run(&cfg).unwrap_err();
    assert!(matches!(err, TrainError::TooManyFailures { failed: 3, total: 3, .. }), "{err}");
}

#[test]
fn collection_only_run_leaves_params_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(0.005, 0.3);
    let mut cfg = config(dir.path(), &ds);
    cfg.run.iterations = 1;
    cfg.ppo.epochs_per_iter = 0;
    let init = cfg.paths.output_dir.with_file_name("init.bin");
    let ckpt = Checkpoint::new(params());
    ckpt.save(&init).unwrap();
    cfg.run.init_checkpoint = Some(init);
    let summary = train_run(&cfg).unwrap();
    assert_eq!(summary.checkpoint.params, ckpt.params);
    let metrics = std::fs::read_to_string(summary.output_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.starts_with("schema_version,iteration,"));
}

fn returns_columns(dir: &Path) -> Vec<String> {
    let mut rdr = csv::Reader::from_path(dir.join("metrics.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let keep: Vec<usize> =
        headers.iter().enumerate().filter(|(_, h)| h.contains("return")).map(|(i, _)| i).collect();
    rdr.records().map(|r| keep.iter().map(|&i| r.as_ref().unwrap()[i].to_owned()).collect::<Vec<_>>().join(",")).collect()
}

#[test]
fn same_seed_same_returns() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(0.005, 0.3);
    let mut cfg = config(dir.path(), &ds);
    cfg.run.iterations = 3;
    cfg.run.eval_every = 2;
    cfg.run.checkpoint_every = 2;
    let a = train_run(&cfg).unwrap();
    let first = returns_columns(&a.output_dir);
    assert!(a.output_dir.join("checkpoint-00002.bin").is_file());
    assert!(a.final_checkpoint.is_file());
    assert_eq!(a.evals.len(), 1);
    cfg.paths.output_dir = dir.path().join("again");
    let b = train_run(&cfg).unwrap();
    assert_eq!(first, returns_columns(&b.output_dir));
    assert_eq!(a.checkpoint, b.checkpoint);
    // Every iteration reports one return per surviving env.
    assert!(a.records.iter().all(|r| r.completed + r.blown_up == r.n_envs - r.failed));

    cfg.run.sampler = SamplerKind::Local;
    cfg.paths.output_dir = dir.path().join("local");
    let c = train_run(&cfg).unwrap();
    assert_eq!(first, returns_columns(&c.output_dir));
}

#[test]
fn worker_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(0.005, 0.3);
    let mut cfg = config(dir.path(), &ds);
    cfg.launcher.poll_timeout_ms = 300;
    let free = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    cfg.run.broker_address = Some(free.to_string());
    let file = dir.path().join("cfg.toml");
    std::fs::write(&file, cfg.to_toml_string()).unwrap();
    let worker = env!("CARGO_BIN_EXE_env-worker");
    let run = |extra: &[&str]| {
        Command::new(worker)
            .args(["--config", file.to_str().unwrap(), "--env-id", "0"])
            .args(extra)
            .status()
            .unwrap()
            .code()
    };
    assert_eq!(run(&["--state-index", "0"]), Some(EXIT_TIMEOUT));
    // The hold-out state needs --test.
    assert_eq!(run(&["--state-index", "3"]), Some(EXIT_SETUP));

    // Waiting for an action that never comes times out.
    let broker = BrokerHandle::spawn("127.0.0.1:0", 8).unwrap();
    let started = std::time::Instant::now();
    let code = run(&["--state-index", "0", "--broker", &broker.addr().to_string()]);
    assert_eq!(code, Some(EXIT_TIMEOUT));
    assert!(started.elapsed() >= Duration::from_millis(300));
    assert!(broker.store().exists(&format!("{}.env0.state.0", cfg.run.run_id)));
}
