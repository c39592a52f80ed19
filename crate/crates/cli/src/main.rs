use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use scl_cli::config::DatasetSource;
use scl_cli::{cmd_ablate, cmd_compare, cmd_eval, cmd_synth, cmd_train, exit_code, Ctx, RunConfig};
use scl_core::models::ArchId;

#[derive(Parser)]
#[command(name = "scl", version, about = "Train and evaluate task-success classifiers")]
struct Cli {
    /// JSON run config; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (defaults to the config's output_dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Run seed; for `synth` it replaces the dataset seeds
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite non-empty output directories
    #[arg(long, global = true)]
    force: bool,

    /// Parallel runs for `ablate` and `compare`
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic datasets as manifest directories
    Synth,
    /// Train one model per task
    Train {
        #[arg(long)]
        arch: Option<ArchId>,
    },
    /// Evaluate trained checkpoints on the test split
    Eval {
        /// Checkpoint directory (single-task configs only)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy against the number of training demonstrations
    Ablate {
        #[arg(long)]
        arch: Option<ArchId>,
    },
    /// Train and evaluate several architectures into one table
    Compare {
        /// Comma-separated architecture ids
        #[arg(long, value_delimiter = ',')]
        archs: Vec<ArchId>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        if matches!(cli.command, Command::Synth) {
            for d in &mut config.datasets {
                if let DatasetSource::Synth(s) = d {
                    s.seed = seed;
                }
            }
        } else {
            config.seed = Some(seed);
        }
    }
    match &cli.command {
        Command::Train { arch: Some(a) } | Command::Ablate { arch: Some(a) } => config.arch = *a,
        Command::Compare { archs } if !archs.is_empty() => config.compare.archs = archs.clone(),
        _ => {}
    }
    config.validate()?;
    let ctx = Ctx {
        out: cli.out.clone().unwrap_or_else(|| config.output_dir.clone()),
        config,
        force: cli.force,
        jobs: cli.jobs.max(1),
    };
    match &cli.command {
        Command::Synth => cmd_synth(&ctx).map(drop),
        Command::Train { .. } => cmd_train(&ctx).map(drop),
        Command::Eval { checkpoint } => cmd_eval(&ctx, checkpoint.as_deref()).map(drop),
        Command::Ablate { .. } => cmd_ablate(&ctx).map(drop),
        Command::Compare { .. } => cmd_compare(&ctx).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
