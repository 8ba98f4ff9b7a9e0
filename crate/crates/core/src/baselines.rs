//! Comparison models: a cell transmission model with a calibrated
//! triangular fundamental diagram, and discovery restricted to a first-order
//! library.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{NormalizedDataset, SensorDataset};
use crate::predictor::{evaluate_forecaster, DiscoveredPde, EvaluationWindow, PredictionReport};
use crate::trainer::{train, TrainingConfig, TrainingTrace};

/// Triangular-FD cell transmission model. Densities in vehicles per mile,
/// flows in vehicles per hour, time in hours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtmConfig {
    pub cell_length: f64,
    pub free_flow_speed: f64,
    pub wave_speed: f64,
    pub capacity: f64,
    pub jam_density: f64,
    pub time_step: f64,
}

impl CtmConfig {
    pub fn new(
        cell_length: f64,
        free_flow_speed: f64,
        wave_speed: f64,
        capacity: f64,
        jam_density: f64,
        time_step: f64,
    ) -> Result<Self> {
        let cfg = Self {
            cell_length,
            free_flow_speed,
            wave_speed,
            capacity,
            jam_density,
            time_step,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("cell length", self.cell_length),
            ("free-flow speed", self.free_flow_speed),
            ("wave speed", self.wave_speed),
            ("capacity", self.capacity),
            ("jam density", self.jam_density),
            ("time step", self.time_step),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidCtm(format!("{name} must be positive, got {v}")));
            }
        }
        let travel = self.free_flow_speed.max(self.wave_speed) * self.time_step;
        if travel > self.cell_length * (1.0 + 1e-12) {
            return Err(Error::CflViolation {
                travel,
                cell_length: self.cell_length,
            });
        }
        Ok(())
    }

    /// Vehicles a cell can send in one step.
    pub fn sending(&self, density: f64) -> f64 {
        (self.free_flow_speed * density).min(self.capacity) * self.time_step
    }

    /// Vehicles a cell can accept in one step.
    pub fn receiving(&self, density: f64) -> f64 {
        (self.wave_speed * (self.jam_density - density))
            .min(self.capacity)
            .max(0.0)
            * self.time_step
    }

    /// Equilibrium flow (veh/h) at a density.
    pub fn flow(&self, density: f64) -> f64 {
        (self.free_flow_speed * density)
            .min(self.capacity)
            .min(self.wave_speed * (self.jam_density - density))
            .max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CtmBoundary {
    /// Vehicles offered at the upstream end and accepted at the downstream
    /// end during the step.
    Open {
        upstream_demand: f64,
        downstream_supply: f64,
    },
    /// No flow across either end.
    Closed,
    /// The last cell feeds the first.
    Ring,
}

/// Interface flows (vehicles per step) for a row: `flows[i]` enters cell `i`,
/// `flows[m]` leaves the last cell.
pub fn ctm_flows(cfg: &CtmConfig, densities: &[f64], boundary: CtmBoundary) -> Vec<f64> {
    let m = densities.len();
    let mut flows = vec![0.0; m + 1];
    for i in 1..m {
        flows[i] = cfg.sending(densities[i - 1]).min(cfg.receiving(densities[i]));
    }
    match boundary {
        CtmBoundary::Open {
            upstream_demand,
            downstream_supply,
        } => {
            flows[0] = upstream_demand.max(0.0).min(cfg.receiving(densities[0]));
            flows[m] = cfg.sending(densities[m - 1]).min(downstream_supply.max(0.0));
        }
        CtmBoundary::Closed => {}
        CtmBoundary::Ring => {
            let y = cfg.sending(densities[m - 1]).min(cfg.receiving(densities[0]));
            flows[0] = y;
            flows[m] = y;
        }
    }
    flows
}

/// Density update: each cell gains its inflow and loses its outflow.
pub fn ctm_step(cfg: &CtmConfig, densities: &[f64], boundary: CtmBoundary) -> Result<Vec<f64>> {
    cfg.validate()?;
    if densities.is_empty() {
        return Err(Error::InvalidCtm("no cells".into()));
    }
    if let Some(bad) = densities.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::InvalidCtm(format!("density {bad} must be finite and >= 0")));
    }
    let flows = ctm_flows(cfg, densities, boundary);
    Ok(densities
        .iter()
        .enumerate()
        .map(|(i, k)| k + (flows[i] - flows[i + 1]) / cfg.cell_length)
        .collect())
}

/// A CTM fitted to a sensor dataset, working on occupancy rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedCtm {
    pub config: CtmConfig,
    /// Vehicles per mile per occupancy percent.
    pub density_per_occupancy: f64,
    /// CTM steps per grid step.
    pub substeps: usize,
    /// Grid step in minutes.
    pub interval_minutes: f64,
    /// Whether the congested branch was fitted (otherwise the default
    /// jam-to-critical density ratio was used).
    pub congested_fit: bool,
}

/// Jam density as a multiple of critical density when the data holds too
/// few congested points to fit the congested branch.
pub const DEFAULT_JAM_RATIO: f64 = 4.0;

fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = p * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Fits the triangular FD to the flow-occupancy scatter: free-flow speed and
/// capacity are the 95th percentiles of speed and hourly flow, critical
/// density is their ratio, and the congested branch is a least-squares line
/// through points denser than critical.
pub fn calibrate_ctm(data: &SensorDataset) -> Result<CalibratedCtm> {
    let per_hour = 60.0 / data.grid.dt;
    let pts: Vec<(f64, f64, f64)> = data
        .observations
        .iter()
        .filter(|o| o.speed > 1.0 && o.occupancy > 0.0)
        .map(|o| (o.occupancy, o.flow * per_hour, o.speed))
        .collect();
    if pts.len() < 3 {
        return Err(Error::NoScoreablePoints);
    }
    // k = q / v, then k ≈ alpha * o through the origin
    let (mut ko, mut oo) = (0.0, 0.0);
    for &(o, q, v) in &pts {
        ko += q / v * o;
        oo += o * o;
    }
    let alpha = ko / oo;
    let vf = percentile(&mut pts.iter().map(|p| p.2).collect::<Vec<_>>(), 0.95);
    let capacity = percentile(&mut pts.iter().map(|p| p.1).collect::<Vec<_>>(), 0.95);
    let kc = capacity / vf;
    let congested: Vec<(f64, f64)> = pts
        .iter()
        .map(|&(_, q, v)| (q / v, q))
        .filter(|&(k, _)| k > kc)
        .collect();
    let mut fitted = None;
    if congested.len() >= 10 {
        let n = congested.len() as f64;
        let mk = congested.iter().map(|p| p.0).sum::<f64>() / n;
        let mq = congested.iter().map(|p| p.1).sum::<f64>() / n;
        let skk: f64 = congested.iter().map(|p| (p.0 - mk).powi(2)).sum();
        let skq: f64 = congested.iter().map(|p| (p.0 - mk) * (p.1 - mq)).sum();
        if skk > 0.0 {
            let slope = skq / skk;
            let jam = mk - mq / slope;
            if slope < 0.0 && jam > kc {
                fitted = Some((-slope, jam));
            }
        }
    }
    let congested_fit = fitted.is_some();
    let (w, kj) = fitted.unwrap_or_else(|| {
        let kj = DEFAULT_JAM_RATIO * kc;
        (capacity / (kj - kc), kj)
    });
    let dt_hours = data.grid.dt / 60.0;
    let substeps = (vf.max(w) * dt_hours / data.grid.dx).ceil().max(1.0) as usize;
    let config = CtmConfig::new(data.grid.dx, vf, w, capacity, kj, dt_hours / substeps as f64)?;
    Ok(CalibratedCtm {
        config,
        density_per_occupancy: alpha,
        substeps,
        interval_minutes: data.grid.dt,
        congested_fit,
    })
}

/// One row per horizon, one value per cell.
pub type Rows = Vec<Vec<f64>>;

impl CalibratedCtm {
    /// Occupancy and flow (vehicles per interval) rows for horizons `1..=k`.
    /// The boundary cells see fixed ghost densities equal to the initial end values.
    pub fn rollout(&self, row: &[f64], k: usize) -> Result<(Rows, Rows)> {
        let cfg = &self.config;
        let mut d: Vec<f64> = row.iter().map(|o| o.max(0.0) * self.density_per_occupancy).collect();
        let m = d.len();
        if m == 0 {
            return Err(Error::InvalidCtm("no cells".into()));
        }
        let boundary = CtmBoundary::Open {
            upstream_demand: cfg.sending(d[0]),
            downstream_supply: cfg.receiving(d[m - 1]),
        };
        let per_interval = self.interval_minutes / 60.0;
        let mut occ = Vec::with_capacity(k);
        let mut flow = Vec::with_capacity(k);
        for _ in 0..k {
            for _ in 0..self.substeps {
                d = ctm_step(cfg, &d, boundary)?;
            }
            occ.push(d.iter().map(|k| k / self.density_per_occupancy).collect());
            flow.push(d.iter().map(|&k| cfg.flow(k) * per_interval).collect());
        }
        Ok((occ, flow))
    }
}

/// Observed occupancy at `step` with missing stations filled by linear
/// interpolation between the nearest observed neighbours (constant beyond
/// the outermost ones).
pub fn interpolated_row(data: &SensorDataset, step: usize) -> Result<Vec<f64>> {
    let table = data.index_table();
    let m = data.grid.m;
    let known: Vec<(usize, f64)> = (0..m)
        .filter_map(|s| table[step][s].map(|i| (s, data.observations[i].occupancy)))
        .collect();
    if known.is_empty() {
        return Err(Error::NoScoreablePoints);
    }
    Ok((0..m)
        .map(|s| match known.binary_search_by_key(&s, |k| k.0) {
            Ok(i) => known[i].1,
            Err(0) => known[0].1,
            Err(i) if i == known.len() => known[i - 1].1,
            Err(i) => {
                let (a, b) = (known[i - 1], known[i]);
                a.1 + (b.1 - a.1) * (s - a.0) as f64 / (b.0 - a.0) as f64
            }
        })
        .collect())
}

/// Scores the CTM rolled out from `initial(start)`.
pub fn evaluate_ctm(
    ctm: &CalibratedCtm,
    data: &SensorDataset,
    window: &EvaluationWindow,
    initial: impl Fn(usize) -> Result<Vec<f64>>,
) -> Result<PredictionReport> {
    evaluate_forecaster("CTM", data, window, |start| {
        let row = initial(start)?;
        Ok((ctm.rollout(&row, window.horizon)?.1, 0))
    })
}

/// Discovery with the library restricted to first spatial derivatives.
pub fn first_order_discovery(
    data: &NormalizedDataset,
    config: &TrainingConfig,
) -> Result<(DiscoveredPde, TrainingTrace)> {
    let cfg = TrainingConfig {
        pde_order_m: 1,
        ..config.clone()
    };
    let r = train(data, &cfg)?;
    let pde = DiscoveredPde::new(r.library, r.coefficients, r.nets, data.params, data.grid)?;
    Ok((pde, r.trace))
}
