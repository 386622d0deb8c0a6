//! Command-line front end: config parsing, runs, solves, sweeps, self-checks
//! and the three-action reproduction bundle.

pub mod appendix;
pub mod check;
pub mod config;
pub mod output;
pub mod run;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use thiserror::Error;

pub use appendix::{reproduce_appendix_d, AppendixDOptions, AppendixDReport, AppendixDRun};
pub use check::{run_checks, CheckReport, CheckResult, Suite};
pub use config::{ExperimentConfig, SweepSpec};
pub use run::{run_experiment, run_sweep, solve, RunOutcome, SolveReport, SweepRow};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] crate::Error),
    #[error("run diverged at step {step}")]
    Diverged { step: usize },
    #[error("{failed} check(s) failed")]
    ChecksFailed { failed: usize },
    #[error("all {cells} sweep cells failed")]
    AllCellsFailed { cells: usize },
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) | CliError::Invalid { .. } => EXIT_CONFIG,
            CliError::Diverged { .. } => EXIT_DIVERGED,
            CliError::ChecksFailed { .. } => EXIT_CHECK_FAILED,
            _ => EXIT_FAILURE,
        }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
            other => other,
        }
    }

    pub(crate) fn prefixed(self, prefix: &str) -> Self {
        match self {
            CliError::Invalid { field, message } => CliError::Invalid {
                field: format!("{prefix}.{field}"),
                message,
            },
            other => other,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "prefgame", version, about = "Tabular preference-game optimisation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonFlags {
    /// Output directory (overrides output.dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override (replaces run.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Convergence tolerance override.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its trajectory and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Solve the regularised Nash equilibrium (and the mixture fixed point when algo.beta is set).
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Run every cell of a sweep file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (default: number of cores).
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Run a self-check suite and print a JSON report.
    Check {
        #[arg(value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reproduce the three-action cyclic-preference trajectories.
    #[command(name = "reproduce-appendix-d")]
    ReproduceAppendixD {
        #[arg(long, default_value = "appendix_d")]
        out: PathBuf,
        /// Comma-separated mixture parameters.
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        betas: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = 100)]
        record_every: usize,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LogLevel {
    Error,
    Info,
    Debug,
}

fn init_logging() {
    let level = std::env::var("PREFGAME_LOG")
        .ok()
        .and_then(|v| LogLevel::from_str(&v, true).ok())
        .unwrap_or(LogLevel::Error);
    let filter = match level {
        LogLevel::Error => log::LevelFilter::Error,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .try_init();
}

fn apply_overrides(config: &mut ExperimentConfig, common: &CommonFlags) -> Result<(), CliError> {
    if let Some(out) = &common.out {
        config.output.dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.run.seed = seed;
    }
    if let Some(tol) = common.tolerance {
        config.run.tolerance = tol;
    }
    config.validate()
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, common } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            apply_overrides(&mut cfg, &common)?;
            let outcome = run_experiment(&cfg)?;
            output::write_run(&cfg.output.dir, &cfg.output.formats, &outcome)?;
            print_json(&outcome.summary)?;
            if outcome.summary.diverged {
                return Err(CliError::Diverged {
                    step: outcome.trajectory.last().step,
                });
            }
            Ok(())
        }
        Command::Solve { config, common } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            apply_overrides(&mut cfg, &common)?;
            let report = solve(&cfg, common.tolerance)?;
            if cfg.output.formats.contains(&config::Format::Json) {
                std::fs::create_dir_all(&cfg.output.dir)?;
                output::write_json(&cfg.output.dir.join("solve.json"), &report)?;
            }
            print_json(&report)?;
            Ok(())
        }
        Command::Sweep {
            config,
            workers,
            common,
        } => {
            let mut spec = SweepSpec::load(&config)?;
            apply_overrides(&mut spec.base, &common).map_err(|e| e.prefixed("base"))?;
            let out = spec.base.output.dir.clone();
            let rows = run_sweep(&spec, &out, workers)?;
            println!("{}", out.join("aggregate.csv").display());
            if rows.iter().all(|r| r.status != "ok" && r.status != "diverged") {
                return Err(CliError::AllCellsFailed { cells: rows.len() });
            }
            Ok(())
        }
        Command::Check { suite, out, seed } => {
            let report = run_checks(suite, seed.unwrap_or(0))?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                output::write_json(&dir.join("check.json"), &report)?;
            }
            print_json(&report)?;
            if report.failed > 0 {
                return Err(CliError::ChecksFailed { failed: report.failed });
            }
            Ok(())
        }
        Command::ReproduceAppendixD {
            out,
            betas,
            steps,
            learning_rate,
            record_every,
            workers,
            tolerance,
        } => {
            let mut opts = AppendixDOptions {
                betas,
                steps,
                learning_rate,
                record_every,
                workers,
                ..AppendixDOptions::default()
            };
            if let Some(t) = tolerance {
                opts.tolerance = t;
            }
            let report = reproduce_appendix_d(&opts, Some(&out))?;
            print_json(&report)?;
            if report.runs.iter().any(|r| r.diverged) {
                let step = report.runs.iter().find(|r| r.diverged).map_or(0, |r| r.steps_completed);
                return Err(CliError::Diverged { step });
            }
            Ok(())
        }
    }
}

pub fn main_entry() -> i32 {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
