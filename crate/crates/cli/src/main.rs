use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "parcon", version, about = "Paraphrase-aware contrastive training experiments")]
struct Cli {
    /// Run configuration (flat TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    HeldOut,
    Train,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Filter candidate paraphrases and append the survivors to the dataset.
    Filter {
        /// Line-delimited `{"sample_id": ..., "candidates": [...]}` records.
        #[arg(long)]
        candidates: PathBuf,
    },
    /// Train with the configured scheme.
    Train,
    /// Score a checkpoint: accuracy and consensus scores.
    Eval {
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "held-out")]
        split: Split,
    },
    /// Compare analytic loss gradients with finite differences.
    Gradcheck,
    /// Tabulate finished runs side by side.
    Report {
        /// Output directories of `train` runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Filter { candidates } => commands::filter(&cfg, &candidates),
        Command::Train => commands::train(&cfg),
        Command::Eval { checkpoint, split } => commands::eval(&cfg, checkpoint.as_deref(), split),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Report { runs } => commands::report(&cfg, &runs),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
