//! Shared fixtures for the benchmarks.

use traffic_pde::grid::NormalizedDataset;
use traffic_pde::synth::{generate, SyntheticScenario};
use traffic_pde::{normalize, TrainingConfig};

/// The default noisy synthetic scenario, normalized.
pub fn synthetic_data() -> NormalizedDataset {
    let run = generate(&SyntheticScenario::default()).expect("default scenario simulates");
    normalize(&run.dataset).expect("non-empty dataset").0
}

/// Default config cut down to `epochs` burn-in epochs.
pub fn short_config(epochs: usize) -> TrainingConfig {
    TrainingConfig {
        burn_in_epochs: epochs,
        main_epochs: 0,
        refine_epochs: 0,
        log_every: 0,
        ..TrainingConfig::default()
    }
}

/// `n` normalized points spread over the domain.
pub fn coords(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let u = i as f64 / n as f64;
            (-0.9 + 1.8 * u, 0.9 - 1.8 * ((7.0 * u) % 1.0))
        })
        .collect()
}
