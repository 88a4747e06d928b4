//! `sparse-ps`: Monte Carlo studies and sparse propensity-score estimates
//! from CSV data.
//!
//! Exit codes: 0 success, 1 user or configuration error, 2 partial
//! computational failure (recorded in the outputs).

mod config;
mod estimate;
mod generate;
mod manifest;
mod report;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable consulted when `--workers` is absent.
pub const WORKERS_ENV: &str = "SPARSE_PS_WORKERS";

#[derive(Parser, Debug)]
#[command(
    name = "sparse-ps",
    version,
    about = "Sparse propensity-score estimation of a mean under missing outcomes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one simulation scenario and write metrics, replications and a manifest.
    Simulate(SimulateArgs),
    /// Write one simulated replication as an input CSV.
    Generate(GenerateArgs),
    /// Estimate the outcome mean from a CSV file.
    Estimate(EstimateArgs),
    /// Print a table of the metrics found in a results directory.
    Report(ReportArgs),
}

/// Flags shared by the commands that run estimators.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "sparse-ps-out")]
    pub out: PathBuf,
    /// Configuration override `key=value` (dotted keys reach nested tables).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Burn-in length of both Bayesian chains.
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Kept draws of both Bayesian chains.
    #[arg(long)]
    pub kept: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated methods, e.g. `ps,tps,lasso,bsps,obsps`.
    #[arg(long)]
    pub methods: Option<String>,
    /// Worker threads for replications.
    #[arg(long, env = WORKERS_ENV)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Replication index whose data are written.
    #[arg(long, default_value_t = 0)]
    pub replication: u64,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Input CSV with `y`, `delta` and covariate columns.
    pub data: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// One of ps, tps, lasso, bsps, obsps.
    #[arg(long, default_value = "bsps")]
    pub method: String,
    /// Covariate names of the response model, required by `tps`.
    #[arg(long, value_delimiter = ',')]
    pub support: Vec<String>,
    /// Also write the kept chain draws to `draws.csv`.
    #[arg(long)]
    pub save_draws: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding `metrics.csv`, directly or one level down.
    pub results: PathBuf,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn user(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }

    pub fn compute(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self::user(error)
    }
}

impl From<std::io::Error> for CliError {
    fn from(error: std::io::Error) -> Self {
        Self::user(error)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are user errors; help and version succeed
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let code = match cli.command {
        Command::Simulate(args) => simulate::run(args),
        Command::Generate(args) => generate::run(args),
        Command::Estimate(args) => estimate::run(args),
        Command::Report(args) => report::run(args),
    };
    ExitCode::from(code)
}
