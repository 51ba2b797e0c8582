mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gbmd::Error;

use crate::commands::Failure;
use crate::config::Preset;

#[derive(Parser)]
#[command(name = "gbmd", version, about = "Train, sample and evaluate GBM-noised score models of price series")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Worker threads for tensor kernels; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true, default_value = "paper")]
    preset: Preset,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build a windowed, normalised dataset from price CSVs or a GARCH simulator.
    Prepare,
    /// Fit the score network by denoising score matching.
    Train,
    /// Generate synthetic log-price series from a checkpoint.
    Sample,
    /// Compute stylized facts of generated (and reference) series.
    Evaluate,
    /// Run the built-in correctness checks.
    Oracle,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::Io { .. }
        | Error::Checkpoint(_)
        | Error::Fetch { .. }
        | Error::Json(_) => 3,
        Error::Numeric(_)
        | Error::Diverged { .. }
        | Error::Tensor(_)
        | Error::Domain(_)
        | Error::Shape { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        // Must happen before the first tensor op initialises the pool.
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let config = match config::load(cli.config.as_deref(), cli.preset, &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let result = match cli.command {
        Command::Prepare => commands::prepare(&config).map_err(Failure::from),
        Command::Train => commands::train(&config).map_err(Failure::from),
        Command::Sample => commands::sample(&config).map_err(Failure::from),
        Command::Evaluate => commands::evaluate(&config).map_err(Failure::from),
        Command::Oracle => commands::run_oracles(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Oracle { failed }) => {
            eprintln!("error: {failed} oracle checks failed");
            ExitCode::from(5)
        }
    }
}
