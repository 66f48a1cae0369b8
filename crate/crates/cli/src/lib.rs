//! `ptse fit | predict | evaluate | simulate`.
//!
//! Exit codes: 0 success, 1 error, 2 result written with a caveat (a fit
//! that stopped at its iteration cap).

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod dataset;

#[derive(Debug, Parser)]
#[command(name = "ptse", version, about = "HMM-based distribution ensemble for quantile forecasts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit an ensemble to training data and write the model document.
    Fit(FitArgs),
    /// Forecast the ensemble quantile for each row of a member-prediction file.
    Predict(PredictArgs),
    /// Score forecast columns against actuals with the q-risk.
    Evaluate(EvaluateArgs),
    /// Run the empirical-CDF convergence experiment on a synthetic HMM.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Training CSV: timestamp, y and m:<label> columns.
    #[arg(long)]
    pub train: PathBuf,
    /// Model document to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Quantile level the member columns forecast.
    #[arg(long)]
    pub q: Option<f64>,
    /// Write the fit report here instead of standard output.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Settings file with `key = value` lines; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub loglik_tol: Option<f64>,
    #[arg(long)]
    pub param_tol: Option<f64>,
    /// Bootstrap resamples per bandwidth selection.
    #[arg(long)]
    pub bootstrap_b: Option<usize>,
    /// Candidate count around the pilot bandwidth, or a comma-separated list.
    #[arg(long)]
    pub candidates: Option<String>,
    /// Seed for the bootstrap draws (default: PTSE_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pi_star_tol: Option<f64>,
    /// Stop re-selecting bandwidths after this many iterations.
    #[arg(long)]
    pub freeze_bandwidth_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model document written by `ptse fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with timestamp and m:<label> columns (y is ignored if present).
    #[arg(long)]
    pub input: PathBuf,
    /// Forecast CSV to write (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    JsonLines,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// CSV with a timestamp column and the forecast column(s).
    #[arg(long)]
    pub forecast: PathBuf,
    /// CSV with timestamp and y columns.
    #[arg(long)]
    pub actuals: PathBuf,
    #[arg(long)]
    pub q: f64,
    /// Forecast column to score; repeat to score several.
    #[arg(long = "column", default_value = "quantile_value")]
    pub columns: Vec<String>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of hidden states.
    #[arg(long)]
    pub k: usize,
    /// Sequence length.
    #[arg(long)]
    pub t: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub tau: f64,
    /// Master seed (default: PTSE_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trajectory CSV (replication,t,empirical_cdf); a JSON sidecar is
    /// written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sidecar path (default: the trajectory path with a .json extension).
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Per-step mean and 95% band CSV.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Read the second emission parameter as a variance.
    #[arg(long)]
    pub variance_reading: bool,
    /// Comma-separated emission means overriding 0.2k.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub means: Option<Vec<f64>>,
    /// Comma-separated emission scales overriding sqrt(k) + 1.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    /// Also write a training CSV whose member k predicts state k's
    /// q-quantile; the chain's stationary distribution is the fit target.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Quantile level of the --dataset members.
    #[arg(long, default_value_t = 0.5)]
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    Caveat,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::Caveat => 2,
        }
    }
}

pub fn execute(cli: Cli, stdout: &mut dyn Write) -> anyhow::Result<Status> {
    match cli.command {
        Command::Fit(a) => commands::fit(a, stdout),
        Command::Predict(a) => commands::predict(a, stdout),
        Command::Evaluate(a) => commands::evaluate(a, stdout),
        Command::Simulate(a) => commands::simulate(a, stdout),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return 1;
            }
            let _ = write!(stdout, "{e}");
            return 0;
        }
    };
    match execute(cli, stdout) {
        Ok(status) => status.code(),
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            1
        }
    }
}
