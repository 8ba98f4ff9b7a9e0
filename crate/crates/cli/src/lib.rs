//! `traffic-pde` command line: ingestion, synthetic data, discovery,
//! prediction, baselines, derivative diagnostics and reports.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 input error.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod artifacts;
pub mod check;
pub mod commands;
pub mod report;
pub mod svg;

/// The standard study grid: 17 stations 2 miles apart, 06:00 to 18:00 in
/// 3-minute steps.
pub const DEFAULT_GRID: &str = "0,32,2,360,1080,3";

#[derive(Debug, Parser)]
#[command(
    name = "traffic-pde",
    version,
    about = "Discover and use traffic PDEs from detector data"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct GlobalArgs {
    /// Seed overriding the one in the config or scenario.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate fine-interval detector rows onto the grid.
    Ingest(IngestArgs),
    /// Simulate a planted PDE and write noisy sensor CSV.
    Synth(SynthArgs),
    /// Train the networks and discover the PDE.
    Discover(DiscoverArgs),
    /// Roll the discovered PDE forward and score flow predictions.
    Predict(PredictArgs),
    /// Comparison models.
    Baseline(BaselineArgs),
    /// Compare network derivatives against finite differences.
    CheckDerivatives(CheckArgs),
    /// Text and SVG summary of a discovery run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Fine-interval CSV in the sensor schema.
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long, default_value = DEFAULT_GRID)]
    pub grid: String,
    /// Sampling interval of the raw rows, minutes.
    #[arg(long, default_value_t = 0.5)]
    pub fine_interval: f64,
    /// Keep grid steps START,END (inclusive) and rebase time.
    #[arg(long)]
    pub window: Option<String>,
    /// Calendar date stamped on the output rows.
    #[arg(long, default_value = "2000-01-01")]
    pub date: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scenario file (TOML); the default scenario when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Noise level as a fraction of each field's standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Also write the clean, fully observed fields here.
    #[arg(long)]
    pub clean_out: Option<PathBuf>,
    #[arg(long, default_value = "2000-01-01")]
    pub date: String,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    /// Sensor CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = DEFAULT_GRID)]
    pub grid: String,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `discover`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub horizon: usize,
    /// Fraction of the day, counted from its end, used as rollout starts.
    #[arg(long, default_value_t = 0.2)]
    pub eval_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    /// Cell transmission model with a calibrated triangular diagram.
    Ctm,
    /// Discovery with a first-order library.
    FirstOrder,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(value_enum)]
    pub kind: BaselineKind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = DEFAULT_GRID)]
    pub grid: String,
    #[arg(long, default_value_t = 5)]
    pub horizon: usize,
    #[arg(long, default_value_t = 0.2)]
    pub eval_fraction: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Number of random network triplets.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `discover`.
    #[arg(long)]
    pub dir: PathBuf,
    /// Metrics JSON files from `predict` or `baseline ctm`.
    #[arg(long)]
    pub metrics: Vec<PathBuf>,
}

/// A failed command, classified for the exit code.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 1,
            CliError::Input(_) => 2,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<traffic_pde::Error> for CliError {
    fn from(e: traffic_pde::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.global.threads {
        // the global pool can only be built once per process
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread count not applied: {e}");
        }
    }
    let g = &cli.global;
    match &cli.command {
        Command::Ingest(a) => commands::ingest(g, a),
        Command::Synth(a) => commands::synth(g, a),
        Command::Discover(a) => commands::discover(g, a).map(|_| ()),
        Command::Predict(a) => commands::predict(g, a).map(|_| ()),
        Command::Baseline(a) => commands::baseline(g, a),
        Command::CheckDerivatives(a) => commands::check_derivatives(g, a),
        Command::Report(a) => commands::report(g, a),
    }
}
