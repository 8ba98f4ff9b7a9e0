use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the discovery pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv header mismatch: expected `{expected}`, found `{found}`")]
    CsvHeader { expected: String, found: String },

    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("row {row}: station at milepost {milepost} lies outside [{x0}, {xm}]")]
    StationOutOfRange {
        row: usize,
        milepost: f64,
        x0: f64,
        xm: f64,
    },

    #[error("row {row}: time {minutes} min lies outside the grid [{t0}, {tm}]")]
    TimeOutOfRange { row: usize, minutes: f64, t0: f64, tm: f64 },

    #[error("duplicate observation for station {station}, time {time}: rows {first_row} and {second_row}")]
    DuplicateObservation {
        station: usize,
        time: usize,
        first_row: usize,
        second_row: usize,
    },

    #[error("fine interval {fine} does not divide target interval {target}")]
    NonDivisibleInterval { fine: f64, target: f64 },

    #[error("invalid window [{start}, {end}] for {n} time steps")]
    InvalidWindow { start: usize, end: usize, n: usize },

    #[error("dataset has no observations")]
    EmptyDataset,

    #[error("rational activation degenerated at m = {m} (|denominator| = {denominator:e}){}", layer_suffix(.layer))]
    DegenerateActivation {
        m: f64,
        denominator: f64,
        layer: Option<usize>,
    },

    #[error("input width mismatch: expected {expected}, got {got}")]
    InputWidth { expected: usize, got: usize },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGradient(String),

    #[error("invalid term library: {0}")]
    InvalidLibrary(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("cannot parse equation: {0}")]
    EquationParse(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("non-finite loss at epoch {epoch} ({phase})")]
    NonFiniteLoss {
        epoch: usize,
        phase: String,
        trace: Box<crate::trainer::TrainingTrace>,
    },

    #[error("spatial differentiation needs at least 3 stations, got {0}")]
    TooFewStations(usize),

    #[error("non-finite occupancy update at station {station}")]
    NonFiniteUpdate { station: usize },

    #[error("no scoreable points")]
    NoScoreablePoints,

    #[error(
        "CTM CFL condition violated: free-flow distance {travel} mi per step exceeds cell length {cell_length} mi"
    )]
    CflViolation { travel: f64, cell_length: f64 },

    #[error("invalid CTM configuration: {0}")]
    InvalidCtm(String),

    #[error(
        "unstable simulation: diffusion number {diffusion_number:.4} (max 0.5), Courant number {courant:.4} (max 1)"
    )]
    UnstableSimulation { diffusion_number: f64, courant: f64 },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn layer_suffix(layer: &Option<usize>) -> String {
    match layer {
        Some(l) => format!(" in layer {l}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::DegenerateActivation { .. }
                | Error::NonFinite(_)
                | Error::NonFiniteGradient(_)
                | Error::NonFiniteLoss { .. }
                | Error::NonFiniteUpdate { .. }
                | Error::UnstableSimulation { .. }
        )
    }
}
