//! Forward-Euler rollout of a discovered PDE and flow prediction through the
//! learned flow network.
//!
//! Rollouts run in physical units: occupancy in percent, positions in miles,
//! one unit of time per grid step. Spatial derivatives come from finite
//! differences along the station row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{NormalizationParams, SensorDataset, SpatiotemporalGrid};
use crate::library::{denormalize_coefficients, Coefficients, TermLibrary, ThetaEvaluator, VARIABLES};
use crate::rational::FieldTriplet;

/// First and second spatial derivatives of a row sampled every `dx`.
/// Central differences inside, second-order one-sided stencils at the ends.
pub fn spatial_derivs_numeric(row: &[f64], dx: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = row.len();
    if m < 3 {
        return Err(Error::TooFewStations(m));
    }
    let u = row;
    let mut d1 = vec![0.0; m];
    let mut d2 = vec![0.0; m];
    for i in 1..m - 1 {
        d1[i] = (u[i + 1] - u[i - 1]) / (2.0 * dx);
        d2[i] = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (dx * dx);
    }
    d1[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dx);
    d1[m - 1] = (3.0 * u[m - 1] - 4.0 * u[m - 2] + u[m - 3]) / (2.0 * dx);
    if m >= 4 {
        d2[0] = (2.0 * u[0] - 5.0 * u[1] + 4.0 * u[2] - u[3]) / (dx * dx);
        d2[m - 1] = (2.0 * u[m - 1] - 5.0 * u[m - 2] + 4.0 * u[m - 3] - u[m - 4]) / (dx * dx);
    } else {
        d2[0] = d2[1];
        d2[m - 1] = d2[1];
    }
    Ok((d1, d2))
}

/// A discovered equation ready for rollout.
#[derive(Debug, Clone)]
pub struct DiscoveredPde {
    pub library: TermLibrary,
    /// Normalized-unit coefficients as trained.
    pub coefficients: Coefficients,
    pub nets: FieldTriplet,
    pub normalization: NormalizationParams,
    pub grid: SpatiotemporalGrid,
    physical: Vec<f64>,
    evaluator: ThetaEvaluator,
}

impl DiscoveredPde {
    pub fn new(
        library: TermLibrary,
        coefficients: Coefficients,
        nets: FieldTriplet,
        normalization: NormalizationParams,
        grid: SpatiotemporalGrid,
    ) -> Result<Self> {
        if coefficients.len() != library.len() {
            return Err(Error::LengthMismatch {
                expected: library.len(),
                got: coefficients.len(),
            });
        }
        let physical = denormalize_coefficients(&library, &coefficients, &normalization, grid.dt)?;
        let evaluator = library.evaluator();
        Ok(Self {
            library,
            coefficients,
            nets,
            normalization,
            grid,
            physical,
            evaluator,
        })
    }

    /// Coefficients of `∂t o` per grid step in physical variables.
    pub fn physical_coefficients(&self) -> &[f64] {
        &self.physical
    }

    /// Learned flow and speed at physical occupancy `o`, station `s`, and
    /// fractional time step `step`.
    pub fn flow_speed(&self, o: f64, station: usize, step: f64) -> Result<(f64, f64)> {
        let n = &self.normalization;
        let x = n.x.apply(self.grid.position(station));
        let t = n.t.apply(self.grid.t0 + step * self.grid.dt);
        let input = [n.o.apply(o), x, t];
        let q = self.nets.flow.forward(&input)?;
        let v = self.nets.speed.forward(&input)?;
        Ok((n.q.invert(q), n.v.invert(v)))
    }

    /// `∂t o` per grid step at every station of `row`, taken at fractional step `step`.
    pub fn rate(&self, row: &[f64], step: f64) -> Result<Vec<f64>> {
        let m = row.len();
        if m != self.grid.m {
            return Err(Error::LengthMismatch {
                expected: self.grid.m,
                got: m,
            });
        }
        let mut q = vec![0.0; m];
        let mut v = vec![0.0; m];
        for s in 0..m {
            (q[s], v[s]) = self.flow_speed(row[s], s, step)?;
        }
        let dx = self.grid.dx;
        let (o_x, o_xx) = spatial_derivs_numeric(row, dx)?;
        let (q_x, q_xx) = spatial_derivs_numeric(&q, dx)?;
        let (v_x, v_xx) = spatial_derivs_numeric(&v, dx)?;
        let mut theta = vec![0.0; self.library.len()];
        let mut out = Vec::with_capacity(m);
        for s in 0..m {
            let inputs: [f64; VARIABLES] = [row[s], q[s], v[s], o_x[s], q_x[s], v_x[s], o_xx[s], q_xx[s], v_xx[s]];
            self.evaluator.eval_into(&inputs, &mut theta);
            out.push(theta.iter().zip(&self.physical).map(|(a, b)| a * b).sum());
        }
        Ok(out)
    }
}

/// Counts of occupancy values pulled back into `[0, 100]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampEvents {
    pub low: usize,
    pub high: usize,
}

impl ClampEvents {
    pub fn total(&self) -> usize {
        self.low + self.high
    }
}

/// One Euler step of `fraction` grid steps from fractional time `step`.
pub fn euler_step_by(
    pde: &DiscoveredPde,
    row: &[f64],
    step: f64,
    fraction: f64,
    clamps: &mut ClampEvents,
) -> Result<Vec<f64>> {
    if let Some(s) = row.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteUpdate { station: s });
    }
    let rate = pde.rate(row, step)?;
    let mut next = Vec::with_capacity(row.len());
    for (s, (o, r)) in row.iter().zip(rate).enumerate() {
        let v = o + fraction * r;
        if !v.is_finite() {
            return Err(Error::NonFiniteUpdate { station: s });
        }
        next.push(if v < 0.0 {
            clamps.low += 1;
            0.0
        } else if v > 100.0 {
            clamps.high += 1;
            100.0
        } else {
            v
        });
    }
    if clamps.total() > 0 {
        log::debug!("occupancy clamped: {clamps:?}");
    }
    Ok(next)
}

/// `ô(t + 1) = ô(t) + ∂t ô(t)` for the row at grid step `step`.
pub fn euler_step(pde: &DiscoveredPde, row: &[f64], step: usize, clamps: &mut ClampEvents) -> Result<Vec<f64>> {
    euler_step_by(pde, row, step as f64, 1.0, clamps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Row `h - 1` holds the prediction `h` steps ahead.
    pub occupancy: Vec<Vec<f64>>,
    pub flow: Vec<Vec<f64>>,
    pub clamps: ClampEvents,
}

/// `k` Euler steps from `row` at grid step `start`, each split into
/// `substeps` equal parts. Flow comes from the learned flow network at each
/// predicted row.
pub fn rollout_substeps(pde: &DiscoveredPde, row: &[f64], start: usize, k: usize, substeps: usize) -> Result<Rollout> {
    if k == 0 || substeps == 0 {
        return Err(Error::Config("rollout needs k >= 1 and at least one sub-step".into()));
    }
    let mut clamps = ClampEvents::default();
    let mut current = row.to_vec();
    let mut occupancy = Vec::with_capacity(k);
    let mut flow = Vec::with_capacity(k);
    let h = 1.0 / substeps as f64;
    for j in 0..k {
        for i in 0..substeps {
            let step = (start + j) as f64 + i as f64 * h;
            current = euler_step_by(pde, &current, step, h, &mut clamps)?;
        }
        let step = (start + j + 1) as f64;
        let q = current
            .iter()
            .enumerate()
            .map(|(s, &o)| pde.flow_speed(o, s, step).map(|p| p.0))
            .collect::<Result<Vec<_>>>()?;
        occupancy.push(current.clone());
        flow.push(q);
    }
    Ok(Rollout {
        occupancy,
        flow,
        clamps,
    })
}

pub fn rollout(pde: &DiscoveredPde, row: &[f64], start: usize, k: usize) -> Result<Rollout> {
    rollout_substeps(pde, row, start, k, 1)
}

/// Error metrics at one horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonScore {
    pub horizon: usize,
    pub minutes: f64,
    pub rmse: f64,
    pub mape: f64,
    pub points: usize,
}

/// MAPE skips truth values below this floor (vehicles per interval).
pub const MAPE_FLOOR: f64 = 1.0;

/// RMSE and MAPE (percent) over paired values; pairs with `None` truth are
/// skipped.
pub fn score(predicted: &[f64], truth: &[Option<f64>]) -> Result<(f64, f64, usize)> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let (mut se, mut n) = (0.0, 0usize);
    let (mut ape, mut n_ape) = (0.0, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        if let Some(t) = t {
            se += (p - t).powi(2);
            n += 1;
            if t.abs() >= MAPE_FLOOR {
                ape += ((p - t) / t).abs();
                n_ape += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoScoreablePoints);
    }
    let mape = if n_ape == 0 { 0.0 } else { 100.0 * ape / n_ape as f64 };
    Ok(((se / n as f64).sqrt(), mape, n))
}

/// One predicted value against its observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub horizon: usize,
    pub station: usize,
    pub time: usize,
    pub predicted_flow: f64,
    pub true_flow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub model: String,
    pub scores: Vec<HorizonScore>,
    #[serde(skip)]
    pub rows: Vec<PredictionRow>,
    pub clamp_events: usize,
}

impl PredictionReport {
    pub fn rmse(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.rmse).collect()
    }
}

/// Which steps serve as rollout starting points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationWindow {
    pub first_start: usize,
    pub last_start: usize,
    pub horizon: usize,
}

impl EvaluationWindow {
    /// Every start in the last `fraction` of the grid whose horizon stays on it.
    pub fn tail(grid: &SpatiotemporalGrid, fraction: f64, horizon: usize) -> Result<Self> {
        if horizon == 0 || grid.n <= horizon {
            return Err(Error::InvalidWindow {
                start: 0,
                end: horizon,
                n: grid.n,
            });
        }
        let last_start = grid.n - 1 - horizon;
        let span = ((grid.n as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
        let first_start = (grid.n - 1).saturating_sub(span).min(last_start);
        Ok(Self {
            first_start,
            last_start,
            horizon,
        })
    }

    pub fn starts(&self) -> std::ops::RangeInclusive<usize> {
        self.first_start..=self.last_start
    }
}

/// Scores a forecaster over a window. `forecast(start)` returns `horizon`
/// flow rows predicted from step `start`.
pub fn evaluate_forecaster(
    model: &str,
    data: &SensorDataset,
    window: &EvaluationWindow,
    mut forecast: impl FnMut(usize) -> Result<(Vec<Vec<f64>>, usize)>,
) -> Result<PredictionReport> {
    let table = data.index_table();
    let m = data.grid.m;
    let mut per_h: Vec<(Vec<f64>, Vec<Option<f64>>)> = vec![(Vec::new(), Vec::new()); window.horizon];
    let mut rows = Vec::new();
    let mut clamp_events = 0;
    for start in window.starts() {
        let (flows, clamps) = forecast(start)?;
        clamp_events += clamps;
        for (h, row) in flows.iter().enumerate().take(window.horizon) {
            let time = start + h + 1;
            for s in 0..m {
                let truth = table[time][s].map(|i| data.observations[i].flow);
                per_h[h].0.push(row[s]);
                per_h[h].1.push(truth);
                if let Some(t) = truth {
                    rows.push(PredictionRow {
                        horizon: h + 1,
                        station: s,
                        time,
                        predicted_flow: row[s],
                        true_flow: t,
                    });
                }
            }
        }
    }
    let scores = per_h
        .iter()
        .enumerate()
        .map(|(h, (p, t))| {
            score(p, t).map(|(rmse, mape, points)| HorizonScore {
                horizon: h + 1,
                minutes: (h + 1) as f64 * data.grid.dt,
                rmse,
                mape,
                points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionReport {
        model: model.to_string(),
        scores,
        rows,
        clamp_events,
    })
}

/// Reconstructed occupancy row at grid step `step`, all stations.
pub fn reconstructed_row(pde: &DiscoveredPde, step: usize) -> Result<Vec<f64>> {
    let n = &pde.normalization;
    let t = n.t.apply(pde.grid.time(step));
    (0..pde.grid.m)
        .map(|s| {
            let x = n.x.apply(pde.grid.position(s));
            pde.nets.occupancy.forward(&[x, t]).map(|o| n.o.invert(o))
        })
        .collect()
}

/// Rolls the discovered PDE from the reconstructed occupancy at each start.
pub fn evaluate_pde(pde: &DiscoveredPde, data: &SensorDataset, window: &EvaluationWindow) -> Result<PredictionReport> {
    evaluate_forecaster("discovered PDE", data, window, |start| {
        let row = reconstructed_row(pde, start)?;
        let r = rollout(pde, &row, start, window.horizon)?;
        Ok((r.flow, r.clamps.total()))
    })
}

/// Ratio of global Euler errors at one grid step for step sizes `1` and
/// `1/2`, against a rollout with `reference_substeps` sub-steps.
pub fn euler_refinement_ratio(
    pde: &DiscoveredPde,
    row: &[f64],
    start: usize,
    reference_substeps: usize,
) -> Result<f64> {
    let reference = rollout_substeps(pde, row, start, 1, reference_substeps)?;
    let err = |substeps: usize| -> Result<f64> {
        let r = rollout_substeps(pde, row, start, 1, substeps)?;
        Ok(r.occupancy[0]
            .iter()
            .zip(&reference.occupancy[0])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt())
    };
    Ok(err(1)? / err(2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Affine;
    use crate::library::enumerate_terms;
    use crate::rational::{init_networks, NetworkWidths};

    fn identity_norm() -> NormalizationParams {
        NormalizationParams {
            x: Affine::IDENTITY,
            t: Affine::IDENTITY,
            o: Affine::IDENTITY,
            q: Affine::IDENTITY,
            v: Affine::IDENTITY,
        }
    }

    fn small_nets() -> FieldTriplet {
        init_networks(
            &NetworkWidths {
                occupancy: vec![2, 4, 1],
                flow: vec![3, 4, 1],
                speed: vec![3, 4, 1],
            },
            1,
        )
        .unwrap()
    }

    fn pde_with(terms: &[(usize, f64)], grid: SpatiotemporalGrid) -> DiscoveredPde {
        let lib = enumerate_terms(2, 2).unwrap();
        let mut values = vec![0.0; lib.len()];
        for &(i, v) in terms {
            values[i] = v;
        }
        let mut norm = identity_norm();
        // unit time affine and dt = 1 make normalized and per-step rates agree
        norm.t = Affine { shift: 0.0, scale: 1.0 };
        DiscoveredPde::new(lib, Coefficients::from_values(values), small_nets(), norm, grid).unwrap()
    }

    fn grid(m: usize, dx: f64) -> SpatiotemporalGrid {
        SpatiotemporalGrid::new(0.0, dx * (m - 1) as f64, dx, 0.0, 20.0, 1.0).unwrap()
    }

    #[test]
    fn finite_differences_on_polynomials() {
        let dx = 0.5;
        let lin: Vec<f64> = (0..6).map(|i| 3.0 * i as f64 * dx).collect();
        let (d1, d2) = spatial_derivs_numeric(&lin, dx).unwrap();
        assert!(d1.iter().all(|d| (d - 3.0).abs() < 1e-12));
        assert!(d2.iter().all(|d| d.abs() < 1e-12));
        let quad: Vec<f64> = (0..6).map(|i| (i as f64 * dx).powi(2)).collect();
        let (d1, d2) = spatial_derivs_numeric(&quad, dx).unwrap();
        for (i, d) in d1.iter().enumerate() {
            assert!((d - 2.0 * i as f64 * dx).abs() < 1e-12);
        }
        assert!(d2.iter().all(|d| (d - 2.0).abs() < 1e-12));
        assert!(matches!(
            spatial_derivs_numeric(&[1.0, 2.0], 1.0),
            Err(Error::TooFewStations(2))
        ));
    }

    #[test]
    fn finite_differences_on_sine() {
        let dx = 0.1;
        let row: Vec<f64> = (0..40).map(|i| (i as f64 * dx).sin()).collect();
        let (d1, d2) = spatial_derivs_numeric(&row, dx).unwrap();
        for i in 1..39 {
            let x = i as f64 * dx;
            assert!((d1[i] - x.cos()).abs() < dx * dx);
            assert!((d2[i] + x.sin()).abs() < dx * dx);
        }
        // one-sided ends are second order too
        assert!((d1[0] - 1.0).abs() < dx * dx);
    }

    #[test]
    fn zero_coefficients_freeze_the_row() {
        let p = pde_with(&[], grid(5, 1.0));
        let row = vec![10.0, 12.0, 15.0, 11.0, 9.0];
        let mut c = ClampEvents::default();
        assert_eq!(euler_step(&p, &row, 0, &mut c).unwrap(), row);
        let r = rollout(&p, &row, 0, 3).unwrap();
        assert!(r.occupancy.iter().all(|o| o == &row));
    }

    #[test]
    fn constant_term_shifts_uniformly() {
        let p = pde_with(&[(0, 0.75)], grid(5, 1.0));
        let row = vec![10.0, 12.0, 15.0, 11.0, 9.0];
        let mut c = ClampEvents::default();
        let next = euler_step(&p, &row, 2, &mut c).unwrap();
        for (a, b) in next.iter().zip(&row) {
            assert!((a - b - 0.75).abs() < 1e-12);
        }
        let r = rollout(&p, &row, 2, 1).unwrap();
        assert_eq!(r.occupancy[0], next);
    }

    #[test]
    fn clamping_is_counted() {
        let p = pde_with(&[(0, -20.0)], grid(4, 1.0));
        let mut c = ClampEvents::default();
        let next = euler_step(&p, &[5.0, 30.0, 50.0, 10.0], 0, &mut c).unwrap();
        assert_eq!(next, vec![0.0, 10.0, 30.0, 0.0]);
        assert_eq!(c, ClampEvents { low: 2, high: 0 });
        let mut c = ClampEvents::default();
        assert!(matches!(
            euler_step(&p, &[5.0, f64::NAN, 1.0, 1.0], 0, &mut c),
            Err(Error::NonFiniteUpdate { station: 1 })
        ));
    }

    #[test]
    fn advection_step_tracks_exact_translation() {
        // ∂t o = -c ∂x o with centred differences, on a smooth profile
        let dx = 0.25;
        let g = grid(41, dx);
        let p = pde_with(&[(4, -0.2)], g);
        let row: Vec<f64> = (0..41).map(|i| 20.0 + 5.0 * (0.3 * i as f64 * dx).sin()).collect();
        let mut c = ClampEvents::default();
        let next = euler_step(&p, &row, 0, &mut c).unwrap();
        for (i, got) in next.iter().enumerate().take(40).skip(1) {
            let exact = 20.0 + 5.0 * (0.3 * (i as f64 * dx - 0.2)).sin();
            assert!((got - exact).abs() < 0.02, "{i}: {got} vs {exact}");
        }
    }

    #[test]
    fn euler_is_first_order() {
        let dx = 0.5;
        let g = grid(21, dx);
        let p = pde_with(&[(4, -0.3), (7, 0.2)], g);
        let row: Vec<f64> = (0..21)
            .map(|i| 15.0 + 4.0 * (-(i as f64 * dx - 5.0).powi(2) / 4.0).exp())
            .collect();
        let ratio = euler_refinement_ratio(&p, &row, 0, 256).unwrap();
        assert!((1.7..=2.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn score_examples() {
        let t = [Some(10.0), Some(20.0), None, Some(0.5)];
        let (rmse, mape, n) = score(&[10.0, 20.0, 99.0, 0.5], &t).unwrap();
        assert_eq!((rmse, mape, n), (0.0, 0.0, 3));
        let (rmse, mape, _) = score(&[12.0, 22.0, 0.0, 2.5], &t).unwrap();
        assert!((rmse - 2.0).abs() < 1e-12);
        // the 0.5 truth is below the MAPE floor
        assert!((mape - 100.0 * (0.2 + 0.1) / 2.0).abs() < 1e-12);
        assert!(matches!(score(&[1.0], &[None]), Err(Error::NoScoreablePoints)));
    }

    #[test]
    fn tail_window_bounds() {
        let g = SpatiotemporalGrid::new(0.0, 32.0, 2.0, 360.0, 1080.0, 3.0).unwrap();
        let w = EvaluationWindow::tail(&g, 0.2, 5).unwrap();
        assert_eq!(w.last_start, 235);
        assert_eq!(w.first_start, 240 - 48);
        assert!(EvaluationWindow::tail(&g, 0.2, 241).is_err());
    }
}
