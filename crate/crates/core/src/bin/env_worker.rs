//! One LES environment talking to the broker. The exit status reports the
//! outcome: 0 done, 1 setup or bad action, 2 broker timeout or connection
//! lost, 3 blow-up.

use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use rlx::orchestrator::RunConfig;
use rlx::worker::{run_episode, WorkerConfig, EXIT_SETUP};

#[derive(Parser)]
#[command(about = "Run one LES episode driven by actions from the broker")]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    env_id: usize,
    #[arg(long)]
    state_index: usize,
    /// Allow the hold-out initial state.
    #[arg(long)]
    test: bool,
    /// Broker address; overrides `RLX_BROKER` and the configuration.
    #[arg(long)]
    broker: Option<String>,
    /// Exit abnormally on reaching this step (fault injection).
    #[arg(long)]
    fault_exit_at: Option<usize>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            log::error!("{e}");
            std::process::exit(EXIT_SETUP);
        }
    };
    let Some(broker_address) = args.broker.or_else(|| std::env::var("RLX_BROKER").ok()).or(cfg.run.broker_address.clone())
    else {
        log::error!("no broker address (use --broker, RLX_BROKER or run.broker_address)");
        std::process::exit(EXIT_SETUP);
    };
    let worker = WorkerConfig {
        broker_address,
        run_id: cfg.run.run_id.clone(),
        env_id: args.env_id,
        dataset_path: cfg.paths.dataset.clone(),
        initial_state_index: args.state_index,
        test_mode: args.test,
        t_end: cfg.solver.t_end,
        dt_rl: cfg.solver.dt_rl,
        dealias: cfg.solver.dealias,
        poll_interval: Duration::from_millis(cfg.launcher.poll_interval_ms),
        poll_timeout: Duration::from_millis(cfg.launcher.poll_timeout_ms),
        fault_exit_at: args.fault_exit_at,
    };
    std::process::exit(run_episode(&worker));
}
