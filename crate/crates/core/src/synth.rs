//! Synthetic ground truth: a planted linear PDE integrated on a refined
//! internal grid, mapped to flow and speed through a spatially varying
//! fundamental diagram, then observed with noise at a subset of stations.
//!
//! The planted equation is stated in normalized coordinates (`x` and `t`
//! both mapped to `[-1, 1]` over the grid), so its coefficients are directly
//! comparable with the discovered ones.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{SensorDataset, SensorObservation, SpatiotemporalGrid};
use crate::library::{Coefficients, ExponentVector, TermLibrary};

/// `o_t = -c o_x + nu o_xx` in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPde {
    pub advection: f64,
    pub diffusion: f64,
    pub description: String,
}

impl Default for PlantedPde {
    fn default() -> Self {
        Self::advection_diffusion(0.5, 0.05)
    }
}

impl PlantedPde {
    pub fn advection_diffusion(c: f64, nu: f64) -> Self {
        Self {
            advection: c,
            diffusion: nu,
            description: format!("∂t o = {} ∂x o + {} ∂x² o", -c, nu),
        }
    }

    /// Nonzero terms with their true coefficients.
    pub fn terms(&self) -> Vec<(ExponentVector, f64)> {
        let mut t = Vec::new();
        if self.advection != 0.0 {
            t.push((ExponentVector::unit(3), -self.advection));
        }
        if self.diffusion != 0.0 {
            t.push((ExponentVector::unit(6), self.diffusion));
        }
        t
    }

    /// True coefficient vector over `lib`.
    pub fn coefficients(&self, lib: &TermLibrary) -> Result<Coefficients> {
        let mut values = vec![0.0; lib.len()];
        for (term, v) in self.terms() {
            let i = lib
                .index_of(&term)
                .ok_or_else(|| Error::InvalidScenario(format!("planted term {} not in library", term.name())))?;
            values[i] = v;
        }
        Ok(Coefficients::from_values(values))
    }
}

/// Gaussian bump in normalized position; amplitude in occupancy percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialCondition {
    /// Occupancy percent far from any pulse.
    pub background: f64,
    pub pulses: Vec<Pulse>,
}

impl InitialCondition {
    pub fn at(&self, x: f64) -> f64 {
        self.background
            + self
                .pulses
                .iter()
                .map(|p| p.amplitude * (-(x - p.center).powi(2) / (2.0 * p.width * p.width)).exp())
                .sum::<f64>()
    }
}

impl Default for InitialCondition {
    fn default() -> Self {
        Self {
            background: 8.0,
            pulses: vec![
                Pulse {
                    center: -2.0,
                    width: 0.5,
                    amplitude: 12.0,
                },
                Pulse {
                    center: -1.1,
                    width: 0.6,
                    amplitude: 9.0,
                },
                Pulse {
                    center: -0.3,
                    width: 0.44,
                    amplitude: 14.0,
                },
                Pulse {
                    center: 0.5,
                    width: 0.7,
                    amplitude: 7.0,
                },
            ],
        }
    }
}

/// Fundamental diagram with a location-dependent free-flow speed and flow
/// scale: `v = vf(x) (1 - o / oj)`, `q = kappa(x) o v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundamentalDiagram {
    /// mph
    pub free_flow_speed: f64,
    /// Occupancy percent at which speed reaches zero.
    pub jam_occupancy: f64,
    /// Vehicles per interval per (percent * mph).
    pub flow_scale: f64,
    /// Relative depth of the free-flow speed dip (a bottleneck).
    pub speed_dip: f64,
    pub speed_dip_center: f64,
    pub speed_dip_width: f64,
    /// Relative amplitude of the flow-scale variation along the road.
    pub flow_scale_variation: f64,
}

impl Default for FundamentalDiagram {
    fn default() -> Self {
        Self {
            free_flow_speed: 65.0,
            jam_occupancy: 80.0,
            flow_scale: 0.35,
            speed_dip: 0.3,
            speed_dip_center: 0.3,
            speed_dip_width: 0.3,
            flow_scale_variation: 0.3,
        }
    }
}

impl FundamentalDiagram {
    pub fn free_flow_at(&self, x: f64) -> f64 {
        let z = (x - self.speed_dip_center) / self.speed_dip_width;
        self.free_flow_speed * (1.0 - self.speed_dip * (-0.5 * z * z).exp())
    }

    pub fn flow_scale_at(&self, x: f64) -> f64 {
        self.flow_scale * (1.0 + self.flow_scale_variation * (1.5 * x + 0.4).cos())
    }

    pub fn speed(&self, o: f64, x: f64) -> f64 {
        self.free_flow_at(x) * (1.0 - o / self.jam_occupancy)
    }

    pub fn flow(&self, o: f64, x: f64) -> f64 {
        self.flow_scale_at(x) * o * self.speed(o, x)
    }
}

/// Grid bounds in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x0: f64,
    pub xm: f64,
    pub dx: f64,
    pub t0: f64,
    pub tm: f64,
    pub dt: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        // 17 stations over 32 miles, 241 three-minute steps (06:00-18:00)
        Self {
            x0: 0.0,
            xm: 32.0,
            dx: 2.0,
            t0: 360.0,
            tm: 1080.0,
            dt: 3.0,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<SpatiotemporalGrid> {
        SpatiotemporalGrid::new(self.x0, self.xm, self.dx, self.t0, self.tm, self.dt)
    }
}

/// Relative noise levels: standard deviation as a fraction of each clean
/// field's standard deviation over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub occupancy: f64,
    pub flow: f64,
    pub speed: f64,
}

impl NoiseLevels {
    pub fn uniform(fraction: f64) -> Self {
        Self {
            occupancy: fraction,
            flow: fraction,
            speed: fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticScenario {
    pub grid: GridSpec,
    pub planted: PlantedPde,
    pub initial: InitialCondition,
    pub fd: FundamentalDiagram,
    pub noise: NoiseLevels,
    /// Fraction of stations removed; the two end stations are always kept.
    pub missing_fraction: f64,
    pub seed: u64,
    /// Internal refinement factor in x.
    pub refinement: usize,
    /// Internal sub-steps per grid time step.
    pub time_refinement: usize,
    /// Extra grid cells simulated beyond each end of the road.
    pub margin_cells: usize,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            planted: PlantedPde::default(),
            initial: InitialCondition::default(),
            fd: FundamentalDiagram::default(),
            noise: NoiseLevels::uniform(0.01),
            missing_fraction: 7.0 / 17.0,
            seed: 17,
            refinement: 10,
            time_refinement: 10,
            margin_cells: 16,
        }
    }
}

impl SyntheticScenario {
    pub fn noiseless() -> Self {
        Self {
            noise: NoiseLevels::uniform(0.0),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> Result<()> {
        let n = &self.noise;
        if [n.occupancy, n.flow, n.speed].iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidScenario("noise levels must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(Error::InvalidScenario(format!(
                "missing fraction {} outside [0, 1)",
                self.missing_fraction
            )));
        }
        if self.refinement == 0 || self.time_refinement == 0 {
            return Err(Error::InvalidScenario("refinement factors must be >= 1".into()));
        }
        if self.planted.diffusion < 0.0 {
            return Err(Error::InvalidScenario("diffusion must be >= 0".into()));
        }
        Ok(())
    }
}

/// Dense clean fields, `[time * m + station]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanFields {
    pub grid: SpatiotemporalGrid,
    pub occupancy: Vec<f64>,
    pub flow: Vec<f64>,
    pub speed: Vec<f64>,
}

impl CleanFields {
    pub fn index(&self, station: usize, time: usize) -> usize {
        time * self.grid.m + station
    }

    pub fn occupancy_at(&self, station: usize, time: usize) -> f64 {
        self.occupancy[self.index(station, time)]
    }
}

/// Normalized position of a station of `grid`.
pub fn normalized_position(grid: &SpatiotemporalGrid, station: usize) -> f64 {
    -1.0 + 2.0 * station as f64 / (grid.m - 1).max(1) as f64
}

/// Integrates the planted PDE from `t = -1` to `t = 1` and samples it at the
/// grid points.
///
/// Advection is upwinded and diffusion centred; the upwind scheme's own
/// numerical diffusion `|c| h (1 - C) / 2` is subtracted from the centred
/// term so the discrete operator matches the planted `nu` to second order.
pub fn simulate(pde: &PlantedPde, scenario: &SyntheticScenario) -> Result<CleanFields> {
    scenario.validate()?;
    let grid = scenario.grid.build()?;
    if grid.m < 2 || grid.n < 2 {
        return Err(Error::InvalidScenario(
            "grid needs at least 2 stations and 2 steps".into(),
        ));
    }
    let r = scenario.refinement;
    let h = 2.0 / (grid.m - 1) as f64 / r as f64;
    let k = 2.0 / (grid.n - 1) as f64 / scenario.time_refinement as f64;
    let (c, nu) = (pde.advection, pde.diffusion);
    let courant = c.abs() * k / h;
    let diffusion_number = nu * k / (h * h);
    if courant > 1.0 || diffusion_number > 0.5 {
        return Err(Error::UnstableSimulation {
            diffusion_number,
            courant,
        });
    }
    let nu_scheme = nu - 0.5 * c.abs() * h * (1.0 - courant);
    let d = nu_scheme * k / (h * h);
    let offset = scenario.margin_cells * r;
    let cells = (grid.m - 1) * r + 2 * offset + 1;
    let x_of = |i: usize| -1.0 + (i as f64 - offset as f64) * h;
    let mut u: Vec<f64> = (0..cells).map(|i| scenario.initial.at(x_of(i))).collect();
    let mut next = u.clone();
    let mut occupancy = Vec::with_capacity(grid.m * grid.n);
    let sample = |u: &[f64], out: &mut Vec<f64>| {
        for s in 0..grid.m {
            out.push(u[offset + s * r]);
        }
    };
    sample(&u, &mut occupancy);
    for _ in 1..grid.n {
        for _ in 0..scenario.time_refinement {
            for i in 0..cells {
                let left = u[i.saturating_sub(1)];
                let right = u[(i + 1).min(cells - 1)];
                let upwind = if c >= 0.0 { u[i] - left } else { right - u[i] };
                next[i] = u[i] - courant * c.signum() * upwind + d * (right - 2.0 * u[i] + left);
            }
            std::mem::swap(&mut u, &mut next);
        }
        sample(&u, &mut occupancy);
    }
    if let Some(bad) = occupancy.iter().find(|o| !o.is_finite() || **o < 0.0 || **o > 100.0) {
        return Err(Error::InvalidScenario(format!(
            "simulated occupancy {bad} outside [0, 100]"
        )));
    }
    let mut flow = Vec::with_capacity(occupancy.len());
    let mut speed = Vec::with_capacity(occupancy.len());
    for (idx, &o) in occupancy.iter().enumerate() {
        let x = normalized_position(&grid, idx % grid.m);
        flow.push(scenario.fd.flow(o, x));
        speed.push(scenario.fd.speed(o, x));
    }
    Ok(CleanFields {
        grid,
        occupancy,
        flow,
        speed,
    })
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Stations dropped by `observe`, chosen from the interior by the seed.
pub fn missing_stations(m: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let count = ((fraction * m as f64).round() as usize).min(m.saturating_sub(2));
    let mut interior: Vec<usize> = (1..m.saturating_sub(1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    interior.shuffle(&mut rng);
    let mut out: Vec<usize> = interior.into_iter().take(count).collect();
    out.sort_unstable();
    out
}

/// Adds Gaussian noise to every field and removes the missing stations.
pub fn observe(clean: &CleanFields, scenario: &SyntheticScenario) -> Result<SensorDataset> {
    scenario.validate()?;
    let grid = clean.grid;
    let missing = missing_stations(grid.m, scenario.missing_fraction, scenario.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(1);
    let sd = |frac: f64, field: &[f64]| {
        Normal::new(0.0, frac * std_dev(field)).map_err(|e| Error::InvalidScenario(e.to_string()))
    };
    let no = sd(scenario.noise.occupancy, &clean.occupancy)?;
    let nq = sd(scenario.noise.flow, &clean.flow)?;
    let nv = sd(scenario.noise.speed, &clean.speed)?;
    let mut clamped = 0usize;
    let mut observations = Vec::with_capacity(grid.m * grid.n);
    for t in 0..grid.n {
        for s in 0..grid.m {
            let i = clean.index(s, t);
            let raw = (
                clean.occupancy[i] + no.sample(&mut rng),
                clean.flow[i] + nq.sample(&mut rng),
                clean.speed[i] + nv.sample(&mut rng),
            );
            if missing.binary_search(&s).is_ok() {
                continue;
            }
            let o = raw.0.clamp(0.0, 100.0);
            let q = raw.1.max(0.0);
            let v = raw.2.max(0.0);
            clamped += usize::from((o, q, v) != raw);
            observations.push(SensorObservation {
                station_index: s,
                time_index: t,
                occupancy: o,
                flow: q,
                speed: v,
            });
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} noisy observations clamped to the physical range");
    }
    SensorDataset::new(grid, observations)
}

/// Simulation plus observation for one scenario.
#[derive(Debug, Clone)]
pub struct SyntheticRun {
    pub clean: CleanFields,
    pub dataset: SensorDataset,
}

pub fn generate(scenario: &SyntheticScenario) -> Result<SyntheticRun> {
    let clean = simulate(&scenario.planted, scenario)?;
    let dataset = observe(&clean, scenario)?;
    Ok(SyntheticRun { clean, dataset })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::enumerate_terms;

    fn single_pulse(c: f64, nu: f64, stations_per_mile: usize) -> SyntheticScenario {
        SyntheticScenario {
            grid: GridSpec {
                dx: 2.0 / stations_per_mile as f64,
                ..GridSpec::default()
            },
            planted: PlantedPde::advection_diffusion(c, nu),
            initial: InitialCondition {
                background: 10.0,
                pulses: vec![Pulse {
                    center: -0.5,
                    width: 0.2,
                    amplitude: 20.0,
                }],
            },
            noise: NoiseLevels::uniform(0.0),
            missing_fraction: 0.0,
            refinement: 10 / stations_per_mile,
            ..SyntheticScenario::default()
        }
    }

    #[test]
    fn frozen_dynamics_keep_the_initial_field() {
        let sc = single_pulse(0.0, 0.0, 1);
        let f = simulate(&sc.planted, &sc).unwrap();
        let m = f.grid.m;
        for t in 0..f.grid.n {
            for s in 0..m {
                assert_eq!(f.occupancy_at(s, t), f.occupancy_at(s, 0));
            }
        }
    }

    #[test]
    fn pure_advection_translates_the_pulse() {
        // 8 stations per normalized unit of the window, so the pulse shape is resolved
        let sc = single_pulse(0.5, 0.0, 4);
        let f = simulate(&sc.planted, &sc).unwrap();
        let last = f.grid.n - 1;
        let mut worst: f64 = 0.0;
        for s in 0..f.grid.m {
            let x = normalized_position(&f.grid, s);
            // after normalized time 2 the pulse has moved by c * 2
            let exact = sc.initial.at(x - 0.5 * 2.0);
            worst = worst.max((f.occupancy_at(s, last) - exact).abs());
        }
        assert!(worst / 20.0 < 0.01, "shape error {}", worst / 20.0);
    }

    #[test]
    fn pure_diffusion_matches_heat_kernel() {
        let sc = single_pulse(0.0, 0.05, 4);
        let f = simulate(&sc.planted, &sc).unwrap();
        let last = f.grid.n - 1;
        let (w0, a0) = (0.2, 20.0);
        let w = (w0 * w0 + 2.0 * 0.05 * 2.0_f64).sqrt();
        let mut worst: f64 = 0.0;
        for s in 0..f.grid.m {
            let x = normalized_position(&f.grid, s);
            let exact = 10.0 + a0 * w0 / w * (-(x + 0.5).powi(2) / (2.0 * w * w)).exp();
            worst = worst.max((f.occupancy_at(s, last) - exact).abs());
        }
        assert!(worst / (a0 * w0 / w) < 0.01, "relative error {}", worst / (a0 * w0 / w));
    }

    #[test]
    fn unstable_configuration_reports_cfl_numbers() {
        let sc = SyntheticScenario {
            refinement: 1,
            time_refinement: 1,
            planted: PlantedPde::advection_diffusion(0.5, 5.0),
            ..SyntheticScenario::default()
        };
        match simulate(&sc.planted, &sc) {
            Err(Error::UnstableSimulation {
                diffusion_number,
                courant,
            }) => {
                assert!(diffusion_number > 0.5);
                assert!(courant < 1.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn planted_coefficients_explain_the_clean_field() {
        let sc = SyntheticScenario::noiseless();
        let f = simulate(&sc.planted, &sc).unwrap();
        let (m, n) = (f.grid.m, f.grid.n);
        let hx = 2.0 / (m - 1) as f64;
        let ht = 2.0 / (n - 1) as f64;
        let (mut res, mut energy) = (0.0, 0.0);
        for t in 1..n - 1 {
            for s in 1..m - 1 {
                let u = |s: usize, t: usize| f.occupancy_at(s, t);
                let ut = (u(s, t + 1) - u(s, t - 1)) / (2.0 * ht);
                let ux = (u(s + 1, t) - u(s - 1, t)) / (2.0 * hx);
                let uxx = (u(s + 1, t) - 2.0 * u(s, t) + u(s - 1, t)) / (hx * hx);
                let r = ut - (-0.5 * ux + 0.05 * uxx);
                res += r * r;
                energy += ut * ut;
            }
        }
        // coarse sensor-grid differences limit the agreement, not the solver
        let rel = (res / energy).sqrt();
        assert!(rel < 0.15, "relative residual {rel}");
        let lib = enumerate_terms(2, 2).unwrap();
        let xi = sc.planted.coefficients(&lib).unwrap();
        assert_eq!(xi.active_indices(), vec![4, 7]);
    }

    #[test]
    fn noiseless_full_observation_equals_clean_fields() {
        let mut sc = SyntheticScenario::noiseless();
        sc.missing_fraction = 0.0;
        let run = generate(&sc).unwrap();
        assert_eq!(run.dataset.len(), 17 * 241);
        for o in &run.dataset.observations {
            let i = run.clean.index(o.station_index, o.time_index);
            assert_eq!(o.occupancy, run.clean.occupancy[i]);
            assert_eq!(o.flow, run.clean.flow[i]);
            assert_eq!(o.speed, run.clean.speed[i]);
        }
    }

    #[test]
    fn default_scenario_drops_seven_interior_stations() {
        let run = generate(&SyntheticScenario::default()).unwrap();
        assert_eq!(run.dataset.missing_stations.len(), 7);
        assert!(!run.dataset.missing_stations.contains(&0));
        assert!(!run.dataset.missing_stations.contains(&16));
        assert_eq!(run.dataset.len(), 10 * 241);
        let again = generate(&SyntheticScenario::default()).unwrap();
        assert_eq!(run.dataset, again.dataset);
    }

    #[test]
    fn noise_level_matches_request() {
        let sc = SyntheticScenario {
            grid: GridSpec {
                dx: 0.5,
                ..GridSpec::default()
            },
            noise: NoiseLevels::uniform(0.05),
            missing_fraction: 0.0,
            refinement: 2,
            ..SyntheticScenario::default()
        };
        let run = generate(&sc).unwrap();
        assert!(run.dataset.len() >= 10_000);
        let target = 0.05 * std_dev(&run.clean.occupancy);
        let resid: Vec<f64> = run
            .dataset
            .observations
            .iter()
            .map(|o| o.occupancy - run.clean.occupancy_at(o.station_index, o.time_index))
            .collect();
        let got = std_dev(&resid);
        assert!((got / target - 1.0).abs() < 0.05, "{got} vs {target}");
    }

    #[test]
    fn scenario_toml_round_trip() {
        let sc = SyntheticScenario::default();
        let text = toml::to_string(&sc).unwrap();
        let back: SyntheticScenario = toml::from_str(&text).unwrap();
        assert_eq!(back, sc);
        let partial: SyntheticScenario = toml::from_str("seed = 3\nmissing_fraction = 0.0\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.grid, GridSpec::default());
    }
}
