//! `hessfine`: experiments around Hessian-distance generalization measures
//! and noise-robust fine-tuning of small feedforward networks.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 capacity error.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use hessfine_core::error::ErrorCategory;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "hessfine", version, about)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Replace the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Worker threads (falls back to HESSFINE_JOBS, then all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source-task initialization and write its checkpoint.
    Pretrain,
    /// Fine-tune on the target task (with optional label noise) per seed.
    Finetune {
        /// Pretrained checkpoint (defaults to config.init_checkpoint).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Compute generalization measures for a checkpoint.
    Measure {
        /// Model checkpoint to measure.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pretrained initialization (defaults to config.init_checkpoint).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Noise-stability curve, relative RSS and label-trace heatmap.
    Stability {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Repeat fine-tuning over a noise-rate list into one consolidated CSV.
    Sweep {
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

fn resolve_jobs(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("HESSFINE_JOBS").ok().and_then(|v| v.parse().ok())
    })
}

fn run(cli: Cli) -> hessfine_core::Result<()> {
    if let Some(jobs) = resolve_jobs(cli.jobs) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| hessfine_core::Error::invalid_parameter("jobs", e.to_string()))?;
    }

    let config_path = cli.config.ok_or_else(|| {
        hessfine_core::Error::invalid_parameter("config", "--config PATH is required")
    })?;
    let mut cfg = config::ExperimentConfig::load(&config_path)?;
    if let Some(seed) = cli.seed_override {
        cfg.seeds = vec![seed];
    }
    let out = cli.out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    std::fs::create_dir_all(&out)?;

    let started = Instant::now();
    match cli.command {
        Command::Pretrain => {
            let path = commands::cmd_pretrain(&cfg, &out)?;
            log::info!("wrote {}", path.display());
        }
        Command::Finetune { init } => {
            commands::cmd_finetune(&cfg, init.as_deref(), &out)?;
        }
        Command::Measure { checkpoint, init } => {
            commands::cmd_measure(&cfg, &checkpoint, init.as_deref(), &out)?;
        }
        Command::Stability { checkpoint } => {
            commands::cmd_stability(&cfg, &checkpoint, &out)?;
        }
        Command::Sweep { init } => {
            commands::cmd_sweep(&cfg, init.as_deref(), &out)?;
        }
    }
    // Timing is logged only; artifacts stay byte-identical across runs.
    log::info!("done in {:.2}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e.category() {
            ErrorCategory::Config | ErrorCategory::Io => 2,
            ErrorCategory::Numeric => 3,
            ErrorCategory::Capacity => 4,
        };
        std::process::exit(code);
    }
}
