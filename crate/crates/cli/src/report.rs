//! Text and SVG summaries of a discovery directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use traffic_pde::{CoefficientFile, PredictionReport, TrainingTrace};

use crate::artifacts::{RunManifest, COEFFICIENTS, RECONSTRUCTION, TRACE};
use crate::svg::Svg;
use crate::{CliError, CliResult};

/// Horizons of the prediction table, in minutes.
pub const TABLE_MINUTES: [f64; 5] = [3.0, 6.0, 9.0, 12.0, 15.0];

pub const UNTRAINED_EQUATION: &str = "∂t o = 0 (all terms active, untrained)";

/// One grid point of `reconstruction.csv`.
#[derive(Debug, Clone, Copy)]
struct Cell {
    time: usize,
    station: usize,
    obs: [Option<f64>; 3],
    hat: [f64; 3],
}

fn missing(dir: &Path, file: &str) -> CliError {
    CliError::input(format!("missing artifact {file} in {}", dir.display()))
}

fn read_reconstruction(dir: &Path) -> CliResult<Vec<Cell>> {
    let path = dir.join(RECONSTRUCTION);
    let text = fs::read_to_string(&path).map_err(|_| missing(dir, RECONSTRUCTION))?;
    let bad = |line: usize| CliError::input(format!("{}: malformed line {line}", path.display()));
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(k + 1));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(k + 1));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        out.push(Cell {
            time: f[0].parse().map_err(|_| bad(k + 1))?,
            station: f[1].parse().map_err(|_| bad(k + 1))?,
            obs: [opt(f[4])?, opt(f[6])?, opt(f[8])?],
            hat: [num(f[5])?, num(f[7])?, num(f[9])?],
        });
    }
    Ok(out)
}

pub fn load_metrics(path: &Path) -> CliResult<PredictionReport> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// RMSE and MAPE per model at the table horizons; `-` where a model has no score.
pub fn prediction_table(reports: &[PredictionReport]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<22}", "model");
    for m in TABLE_MINUTES {
        let _ = write!(out, " {:>17}", format!("{m:.0}-min"));
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<22}", r.model);
        for m in TABLE_MINUTES {
            let cell = r
                .scores
                .iter()
                .find(|s| (s.minutes - m).abs() < 1e-9)
                .map(|s| format!("{:.2} / {:.2}%", s.rmse, s.mape))
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, " {cell:>17}");
        }
        out.push('\n');
    }
    out
}

/// The equation line: the formatted PDE, or the untrained marker for a run
/// that never updated its coefficients.
pub fn equation_line(coeffs: &CoefficientFile, trace: &TrainingTrace) -> String {
    if trace.is_empty() && coeffs.terms.iter().all(|t| t.active && t.value == 0.0) {
        UNTRAINED_EQUATION.to_string()
    } else {
        coeffs.equation.clone()
    }
}

pub struct Report {
    pub text: String,
    pub svg: String,
}

pub fn render(dir: &Path, metrics: &[PredictionReport]) -> CliResult<Report> {
    let manifest = RunManifest::load(dir).map_err(|_| missing(dir, crate::artifacts::MANIFEST))?;
    let coeff_path = dir.join(COEFFICIENTS);
    if !coeff_path.exists() {
        return Err(missing(dir, COEFFICIENTS));
    }
    let coeffs = CoefficientFile::load(&coeff_path)?;
    let trace_path = dir.join(TRACE);
    if !trace_path.exists() {
        return Err(missing(dir, TRACE));
    }
    let trace = TrainingTrace::load(&trace_path)?;
    let cells = read_reconstruction(dir)?;
    let grid = manifest.grid;

    let equation = equation_line(&coeffs, &trace);
    let mut text = String::new();
    let _ = writeln!(
        text,
        "data        {} (sha256 {})",
        manifest.data_path, manifest.data_sha256
    );
    let _ = writeln!(text, "seed        {}", manifest.seed);
    let _ = writeln!(
        text,
        "epochs      {} burn-in, {} main, {} refine",
        manifest.config.burn_in_epochs, manifest.config.main_epochs, manifest.config.refine_epochs
    );
    let _ = writeln!(text, "grid        {} stations x {} steps", grid.m, grid.n);
    let _ = writeln!(text);
    let _ = writeln!(text, "equation    {equation}");
    if equation != UNTRAINED_EQUATION {
        let _ = writeln!(text, "physical    {}", coeffs.equation_physical);
    }
    let active = coeffs.terms.iter().filter(|t| t.active).count();
    let _ = writeln!(text, "active      {active} of {} terms", coeffs.terms.len());
    if let Some(last) = trace.records.last() {
        let _ = writeln!(
            text,
            "final loss  total {:.3e}  L_o {:.3e}  L_q {:.3e}  L_v {:.3e}  L_pde {:.3e}",
            last.total, last.l_o, last.l_q, last.l_v, last.l_pde
        );
    }
    let names = ["occupancy", "flow", "speed"];
    for (k, name) in names.iter().enumerate() {
        let (se, n) = cells
            .iter()
            .filter_map(|c| c.obs[k].map(|o| (o - c.hat[k]).powi(2)))
            .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
        if n > 0 {
            let _ = writeln!(
                text,
                "rmse {name:<10} {:.4} over {n} observed points",
                (se / n as f64).sqrt()
            );
        }
    }
    if !metrics.is_empty() {
        let _ = writeln!(text);
        let _ = writeln!(text, "flow prediction, RMSE / MAPE");
        text.push_str(&prediction_table(metrics));
    }

    // figures
    let mut obs = vec![vec![vec![None; grid.m]; grid.n]; 3];
    let mut hat = vec![vec![vec![None; grid.m]; grid.n]; 3];
    for c in &cells {
        if c.time < grid.n && c.station < grid.m {
            for k in 0..3 {
                obs[k][c.time][c.station] = c.obs[k];
                hat[k][c.time][c.station] = Some(c.hat[k]);
            }
        }
    }
    let panel_w = 160.0;
    let panel_h = 240.0;
    let mut svg = Svg::new(
        40.0 + 2.0 * (panel_w + 30.0) + 20.0 + 420.0,
        140.0 + 3.0 * (panel_h + 40.0) + 20.0,
    );
    svg.text(20.0, 24.0, 14.0, &equation);
    for k in 0..3 {
        let vals = obs[k]
            .iter()
            .flatten()
            .chain(hat[k].iter().flatten())
            .flatten()
            .copied();
        let lo = vals.clone().fold(f64::INFINITY, f64::min);
        let hi = vals.fold(f64::NEG_INFINITY, f64::max);
        let y = 70.0 + k as f64 * (panel_h + 40.0);
        svg.heatmap(
            20.0,
            y,
            panel_w,
            panel_h,
            &format!("{} observed", names[k]),
            &obs[k],
            (lo, hi),
        );
        svg.heatmap(
            20.0 + panel_w + 30.0,
            y,
            panel_w,
            panel_h,
            &format!("{} reconstructed", names[k]),
            &hat[k],
            (lo, hi),
        );
    }
    let curves_x = 40.0 + 2.0 * (panel_w + 30.0);
    let series = |f: fn(&traffic_pde::trainer::EpochRecord) -> f64| trace.records.iter().map(f).collect::<Vec<f64>>();
    svg.log_curves(
        curves_x,
        70.0,
        400.0,
        240.0,
        "training losses",
        &[
            ("total", series(|r| r.total)),
            ("L_o", series(|r| r.l_o)),
            ("L_q", series(|r| r.l_q)),
            ("L_v", series(|r| r.l_v)),
            ("L_pde", series(|r| r.l_pde)),
        ],
    );
    for (i, line) in text.lines().filter(|l| !l.starts_with("data")).enumerate() {
        svg.text(curves_x, 350.0 + 13.0 * i as f64, 10.0, line);
    }
    Ok(Report {
        text,
        svg: svg.finish(),
    })
}
