//! `oodcal`: calibrate descriptor banks, score images and evaluate OOD detection.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "oodcal", version, about)]
struct Cli {
    /// JSON config file; falls back to $OODCAL_CONFIG
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    run: RunConfig,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world bundle and a config.json pointing at it
    Synth,
    /// Compute per-class descriptor confidence and write calibration.json
    Calibrate,
    /// Score labeled images and write scores.csv
    Detect,
    /// Compute FPR95 and AUROC from score CSVs and write metrics.json
    Evaluate {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
    },
    /// Check that every referenced image and text has an embedding
    Validate,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.run, cli.config.as_deref())?;
    if let Some(t) = cfg.threads {
        if t == 0 {
            return Err(CliError::Usage("threads must be positive".into()));
        }
        if t > 1 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
    }
    match &cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Calibrate => commands::calibrate(&cfg),
        Command::Detect => commands::detect(&cfg),
        Command::Evaluate { scores } => commands::evaluate_cmd(&cfg, scores),
        Command::Validate => commands::validate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
