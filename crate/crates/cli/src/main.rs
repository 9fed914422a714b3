//! `propcal`: command-line front end for the proportion estimators,
//! coverage tools, smoother, calibration and Monte Carlo laboratory.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] propcal::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use propcal::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Argument(_)) => 2,
            CliError::Core(E::Parse { .. }) => 3,
            CliError::Core(E::Config(_)) => 4,
            CliError::Core(E::Degenerate(_)) => 5,
            CliError::Core(E::Numeric { .. }) => 6,
            CliError::Core(E::NonConvergence { .. }) => 7,
            CliError::Core(E::Io { .. }) => 8,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "propcal", version, about = "Binomial and multinomial proportion estimation with calibrated coverage")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "propcal_out")]
    pub out: PathBuf,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` settings file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use 10,000 Monte Carlo repetitions unless set explicitly.
    #[arg(long, global = true)]
    pub paper_scale: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-bin estimates and intervals for a histogram CSV.
    Estimate(commands::EstimateArgs),
    /// Exact coverage over a grid of N or p.
    Coverage(commands::CoverageArgs),
    /// Optimize the Dirichlet pseudocount alpha0 per N (and zone).
    Optimize(commands::OptimizeArgs),
    /// De-noise a series with the segment-ensemble smoother.
    Smooth(commands::SmoothArgs),
    /// Fit A0, B0 and Psi(N) from Monte Carlo ensembles.
    Calibrate(commands::CalibrateArgs),
    /// Monte Carlo ensembles over trial pdfs and sample sizes.
    Mc(commands::McArgs),
    /// Self-consistent admissible values for the discrete estimator.
    DiscreteTable(commands::DiscreteArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("propcal: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
