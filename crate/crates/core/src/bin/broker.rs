//! Standalone broker. Prints `listening on ADDR` once bound and runs until
//! SIGINT or SIGTERM.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use rlx::broker::BrokerHandle;

#[derive(Parser)]
#[command(about = "In-memory tensor broker")]
struct Args {
    /// Address to bind; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:6780")]
    bind: String,
    #[arg(long, default_value_t = 256)]
    max_conn: usize,
    /// Write the final counters here as JSON on shutdown.
    #[arg(long)]
    stats_json: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        signal_hook::flag::register(sig, stop.clone()).context("installing signal handler")?;
    }
    let handle = BrokerHandle::spawn(&args.bind, args.max_conn)?;
    println!("listening on {}", handle.addr());
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
    let stats = handle.shutdown();
    log::info!("shut down: {stats:?}");
    if let Some(path) = args.stats_json {
        std::fs::write(&path, serde_json::to_string_pretty(&stats)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
