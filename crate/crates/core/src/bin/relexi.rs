//! Command-line front end: train, benchmark, evaluate, prepare data.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlx::orchestrator::benchmark::{benchmark_scaling, write_csv, ScalingMode, DEFAULT_REPETITIONS};
use rlx::orchestrator::eval::evaluate_path;
use rlx::orchestrator::train::{initial_checkpoint, load_dataset};
use rlx::orchestrator::{train_run, RunConfig};
use rlx::policy::Checkpoint;
use rlx::sim::dataset::Dataset;
use rlx::sim::dns::generate_dns_dataset;

#[derive(Parser)]
#[command(about = "Train and evaluate an eddy-viscosity control policy")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the training loop.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure sampling time against the number of environments (weak) or
    /// cores per environment (strong).
    Benchmark {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "weak")]
        mode: ScalingMode,
        /// Env counts (weak) or cores per env (strong).
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        envs: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
        repetitions: usize,
        /// Frozen policy; a fresh initialization when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "scaling.csv")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the hold-out state against constant Cs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; defaults to `eval.json` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the reference DNS and the filtered initial states.
    PrepareDns {
        #[arg(long, default_value = "24dof")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output path; defaults to the configured dataset path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>, preset: Option<&str>) -> anyhow::Result<RunConfig> {
    Ok(match (path, preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::preset("24dof")?,
    })
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Train { config, preset, iterations, seed } => {
            let mut cfg = load_config(config.as_ref(), preset.as_deref())?;
            if let Some(i) = iterations {
                cfg.run.iterations = i;
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            cfg.validate()?;
            let summary = train_run(&cfg)?;
            println!("final checkpoint: {}", summary.final_checkpoint.display());
            println!("metrics: {}", summary.output_dir.join("metrics.csv").display());
        }
        Cmd::Benchmark { config, mode, envs, repetitions, checkpoint, out } => {
            let cfg = load_config(config.as_ref(), None)?;
            if envs.is_empty() || envs.contains(&0) {
                bail!("--envs needs positive counts");
            }
            let dataset = load_dataset(&cfg)?;
            let params = match checkpoint {
                Some(p) => Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?.params,
                None => initial_checkpoint(&cfg, &dataset, &mut ChaCha8Rng::seed_from_u64(cfg.run.seed))?.params,
            };
            let rows = benchmark_scaling(&cfg, &dataset, &params, mode, &envs, repetitions)?;
            for r in &rows {
                println!(
                    "envs {:>3} cores/env {:>2}: {:.3}s +- {:.3}  speedup {:.2}  efficiency {:.2}",
                    r.n_envs, r.cores_per_env, r.mean_s, r.std_s, r.speedup, r.efficiency
                );
            }
            write_csv(&rows, &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Eval { checkpoint, config, out } => {
            let cfg = load_config(config.as_ref(), None)?;
            let report = evaluate_path(&cfg, &checkpoint)?;
            println!(
                "policy: return {:.4}  mean l {:.4}",
                report.policy.normalized_return, report.policy.mean_error
            );
            for p in &report.sweep {
                println!("Cs {:.2}: return {:.4}  mean l {:.4}", p.cs, p.summary.normalized_return, p.summary.mean_error);
            }
            println!("best constant Cs {:.2}", report.best_constant.cs);
            let out = out.unwrap_or_else(|| checkpoint.with_file_name("eval.json"));
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!("wrote {}", out.display());
        }
        Cmd::PrepareDns { preset, seed, config, out } => {
            let mut cfg = load_config(config.as_ref(), Some(&preset))?;
            if let Some(s) = seed {
                cfg.dns.seed = s;
            }
            let dns = generate_dns_dataset(&cfg.dns.config, cfg.dns.n_snapshots, cfg.dns.seed)?;
            log::info!("forcing {:.4}, mean energy {:.4}", dns.forcing, dns.mean_energy);
            let dataset = Dataset::from_dns(&dns, cfg.solver.grid()?, cfg.dns.seed)?;
            let out = out.unwrap_or(cfg.paths.dataset.clone());
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            dataset.save(&out)?;
            println!("wrote {} ({} snapshots, hold-out {})", out.display(), dataset.snapshots.len(), dataset.hold_out);
        }
    }
    Ok(())
}
