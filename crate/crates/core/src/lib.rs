//! Discovery of nonlinear traffic PDEs from sparse, noisy detector grids.
//!
//! Three rational-activation networks reconstruct occupancy, flow and speed
//! over the space-time grid; their exact derivatives feed a monomial library
//! whose sparse coefficients are learned jointly with the networks. The
//! discovered equation is then rolled forward for flow prediction.

// negated comparisons are used on purpose: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod baselines;
pub mod derivatives;
pub mod error;
pub mod grid;
pub mod library;
pub mod predictor;
pub mod rational;
pub mod synth;
pub mod taylor;
pub mod trainer;

pub use baselines::{calibrate_ctm, ctm_step, CalibratedCtm, CtmBoundary, CtmConfig};
pub use derivatives::{EngineOptions, Jet2, SecondOrderFormula, StateAtPoint};
pub use error::{Error, Result};
pub use grid::{
    load_sensor_csv, normalize, NormalizationParams, NormalizedDataset, SensorDataset, SensorObservation,
    SpatiotemporalGrid,
};
pub use library::{enumerate_terms, format_pde, CoefficientFile, Coefficients, ExponentVector, TermLibrary};
pub use predictor::{DiscoveredPde, PredictionReport};
pub use rational::{Checkpoint, FieldTriplet, NetworkWidths, RationalMlp};
pub use synth::{PlantedPde, SyntheticScenario};
pub use trainer::{train, LossWeights, Schedule, TrainingConfig, TrainingResult, TrainingTrace};
