//! Command-line front end: generate synthetic streams, run method
//! comparisons, and report aggregated results.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 data validation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use limes::experiment::{self, ExperimentError, RunOptions};
use limes::metrics::PairingMode;

#[derive(Parser)]
#[command(
    name = "limes",
    version,
    about = "Streaming classification under class-prior shift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic class-prior-shift stream.
    Generate {
        /// Experiment config file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset CSV; a sidecar `.manifest` is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured methods over a dataset.
    Run {
        /// Experiment config file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV produced by `generate` (or matching its schema).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for series, checkpoints, and histories.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated method subset overriding the config.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Seed overriding the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoints in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize a run directory into tables and CSVs.
    Report {
        /// Run directory written by `run`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Pairing for the Wilcoxon tests: per-realization or per-day.
        #[arg(long, default_value = "per-realization")]
        pairing: String,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = experiment::load_config(&config)?;
            let summary = experiment::generate(&cfg, &out)?;
            println!(
                "wrote {} steps (L={}, d={}, {} examples/step, period {}) to {}",
                summary.num_steps,
                summary.num_classes,
                summary.feature_dim,
                summary.examples_per_step,
                summary.period,
                summary.data_path.display()
            );
            Ok(())
        }
        Command::Run {
            config,
            data,
            out,
            methods,
            seed,
            resume,
        } => {
            let cfg = experiment::load_config(&config)?;
            let methods = methods
                .map(|names| experiment::parse_methods(&names))
                .transpose()?;
            let options = RunOptions {
                methods,
                seed,
                resume,
            };
            let summary = experiment::run(&cfg, &data, &out, &options)?;
            println!(
                "evaluated {} methods x {} realizations over {} steps; series at {}",
                summary.methods.len(),
                summary.realizations,
                summary.steps_evaluated,
                summary.series_path.display()
            );
            Ok(())
        }
        Command::Report { input, pairing } => {
            let pairing = match pairing.as_str() {
                "per-realization" => PairingMode::PerRealization,
                "per-day" => PairingMode::PerDay,
                other => {
                    return Err(ExperimentError::Config(format!(
                        "unknown pairing `{other}`, expected per-realization or per-day"
                    )))
                }
            };
            let report = experiment::report(&input, pairing)?;
            print!("{}", experiment::render_report_table(&report));
            Ok(())
        }
    }
}
