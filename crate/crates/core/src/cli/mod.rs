//! The `extinction` command line: `simulate`, `fit`, `polarscan`, `report`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 bad input, 3 fit did not
//! converge, 4 no detectable signal. Output goes to `--out`, falling back
//! to `$EXTINCTION_OUT_DIR` and then the working directory.

mod commands;
pub mod config;
pub mod csvio;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub use commands::{cmd_fit, cmd_polarscan, cmd_report, cmd_simulate};
pub use config::RunConfig;
pub use csvio::SpectrumTable;

pub const OUT_DIR_ENV: &str = "EXTINCTION_OUT_DIR";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    BadInput(String),
    #[error("{0}")]
    NoConvergence(String),
    #[error("{0}")]
    NoSignal(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::BadInput(_) => 2,
            CliError::NoConvergence(_) => 3,
            CliError::NoSignal(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NoPeak { .. } | Error::LowContrast { .. } => CliError::NoSignal(e.to_string()),
            _ => CliError::BadInput(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "extinction", version, about = "Single-emitter extinction spectroscopy toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate model and photon-counting spectra from a config file.
    Simulate(SimulateArgs),
    /// Fit fluorescence, transmission or multi-angle transmission spectra.
    Fit(FitArgs),
    /// Model spectra and visibility map over a series of analyzer angles.
    Polarscan(PolarscanArgs),
    /// Table of the derived scalar quantities.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
    /// Overrides `[acquisition] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Analyzer angle in degrees; needs a `[polarization]` section.
    #[arg(long, allow_negative_numbers = true)]
    pub theta: Option<f64>,
    /// Use the power-broadened lineshape.
    #[arg(long)]
    pub saturation: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Spectrum CSV file(s).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Supplies fixed emitter quantities and the lineshape.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
    /// `transmission` or `fluorescence`.
    #[arg(long, default_value = "transmission")]
    pub model: String,
    /// Fluorescence spectrum from which γ is taken.
    #[arg(long)]
    pub fluorescence: Option<PathBuf>,
    /// Fixed homogeneous linewidth, MHz.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fixed radiative linewidth, MHz.
    #[arg(long)]
    pub gamma0: Option<f64>,
    /// Fit all inputs jointly across analyzer angles.
    #[arg(long)]
    pub joint: bool,
    /// Analyzer angle per input file, degrees (for files without a
    /// `theta_deg` column).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub theta: Vec<f64>,
    #[arg(long)]
    pub saturation: bool,
    /// Accepted for symmetry with `simulate`; fits are deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct PolarscanArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub saturation: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write `report.json` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lambda_nm: Option<f64>,
    #[arg(long)]
    pub tau_ns: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Radiative linewidth for the enhancement factor, MHz; defaults to
    /// the lifetime value.
    #[arg(long)]
    pub gamma0: Option<f64>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Polarscan(a) => cmd_polarscan(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

/// Parses `args` (including the program name), runs and returns the exit
/// code. Messages go to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
