use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use traffic_pde::baselines::{evaluate_ctm, first_order_discovery, interpolated_row};
use traffic_pde::grid::{aggregate_sensor_csv, window};
use traffic_pde::predictor::{evaluate_pde, EvaluationWindow};
use traffic_pde::synth::{generate, CleanFields, NoiseLevels};
use traffic_pde::{
    calibrate_ctm, load_sensor_csv, normalize, train, Checkpoint, CoefficientFile, DiscoveredPde, PredictionReport,
    SensorDataset, SensorObservation, SpatiotemporalGrid, SyntheticScenario, TrainingConfig,
};

use crate::artifacts::{self, DiscoveryOutputs, RunManifest, Staging};
use crate::{check, report, BaselineArgs, BaselineKind, CheckArgs, CliError, CliResult, DiscoverArgs, GlobalArgs};
use crate::{IngestArgs, PredictArgs, ReportArgs, SynthArgs};

fn parse_date(s: &str) -> CliResult<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| CliError::input(format!("bad date `{s}`: {e}")))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::input(format!("{}: {e}", path.display()))
}

/// Writes a dataset to `out`, or to stdout when absent.
fn emit_dataset(ds: &SensorDataset, out: Option<&Path>, date: NaiveDate) -> CliResult<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            ds.write_csv(p, date)?
        }
        None => ds.write_csv_to(std::io::stdout().lock(), date)?,
    }
    Ok(())
}

/// The training config: `--config` or the defaults, with `--seed` applied.
pub fn load_config(g: &GlobalArgs) -> CliResult<TrainingConfig> {
    let mut cfg = match &g.config {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path, grid: &str) -> CliResult<SensorDataset> {
    if !path.exists() {
        return Err(CliError::input(format!("data file {} not found", path.display())));
    }
    let grid = SpatiotemporalGrid::parse(grid)?;
    Ok(load_sensor_csv(path, &grid)?)
}

pub fn ingest(g: &GlobalArgs, a: &IngestArgs) -> CliResult<()> {
    let grid = SpatiotemporalGrid::parse(&a.grid)?;
    let date = parse_date(&a.date)?;
    let text = fs::read_to_string(&a.raw).map_err(|e| io_err(&a.raw, e))?;
    let mut ds = aggregate_sensor_csv(&text, &grid, a.fine_interval)?;
    if let Some(w) = &a.window {
        let (s, e) = w
            .split_once(',')
            .and_then(|(s, e)| Some((s.trim().parse().ok()?, e.trim().parse().ok()?)))
            .ok_or_else(|| CliError::input(format!("bad window `{w}`, expected START,END")))?;
        ds = window(&ds, s, e)?;
    }
    log::info!(
        "{} grid observations, stations missing: {:?}",
        ds.len(),
        ds.missing_stations
    );
    emit_dataset(&ds, g.out.as_deref(), date)
}

fn clean_dataset(clean: &CleanFields) -> CliResult<SensorDataset> {
    let g = clean.grid;
    let obs = (0..g.n)
        .flat_map(|j| (0..g.m).map(move |s| (s, j)))
        .map(|(s, j)| {
            let i = clean.index(s, j);
            SensorObservation {
                station_index: s,
                time_index: j,
                occupancy: clean.occupancy[i],
                flow: clean.flow[i],
                speed: clean.speed[i],
            }
        })
        .collect();
    Ok(SensorDataset::new(g, obs)?)
}

pub fn synth(g: &GlobalArgs, a: &SynthArgs) -> CliResult<()> {
    let mut scenario = match &a.scenario {
        Some(p) => SyntheticScenario::load(p)?,
        None => SyntheticScenario::default(),
    };
    if let Some(n) = a.noise {
        scenario.noise = NoiseLevels::uniform(n);
    }
    if let Some(s) = g.seed {
        scenario.seed = s;
    }
    let date = parse_date(&a.date)?;
    let run = generate(&scenario)?;
    log::info!(
        "{} observations, planted {}, missing stations {:?}",
        run.dataset.len(),
        scenario.planted.description,
        run.dataset.missing_stations
    );
    if let Some(p) = &a.clean_out {
        emit_dataset(&clean_dataset(&run.clean)?, Some(p), date)?;
    }
    emit_dataset(&run.dataset, g.out.as_deref(), date)
}

fn out_dir(g: &GlobalArgs, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn manifest_for(command: &str, cfg: &TrainingConfig, data: &SensorDataset, path: &Path) -> CliResult<RunManifest> {
    Ok(RunManifest {
        command: command.into(),
        seed: cfg.seed,
        config: cfg.clone(),
        grid: data.grid,
        data_path: path.display().to_string(),
        data_sha256: artifacts::sha256_file(path)?,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        core_version: traffic_pde::VERSION.into(),
        started_utc: artifacts::now_utc(),
        finished_utc: String::new(),
        outputs: Vec::new(),
    })
}

/// Runs discovery and writes the artifact directory; returns its path.
pub fn discover(g: &GlobalArgs, a: &DiscoverArgs) -> CliResult<PathBuf> {
    let cfg = load_config(g)?;
    let data = load_data(&a.data, &a.grid)?;
    let target = out_dir(g, "discovery");
    let staging = Staging::new(&target, a.force)?;
    let mut manifest = manifest_for("discover", &cfg, &data, &a.data)?;
    let (norm_data, norm) = normalize(&data)?;
    let result = train(&norm_data, &cfg)?;
    let outputs = DiscoveryOutputs {
        nets: &result.nets,
        norm: &norm,
        library: &result.library,
        coefficients: &result.coefficients,
        trace: &result.trace,
        data: &data,
        config: &cfg,
    };
    let coeffs = artifacts::write_discovery(&staging, &outputs, &mut manifest)?;
    let dir = staging.commit()?;
    println!("{}", coeffs.equation);
    log::info!("physical: {}", coeffs.equation_physical);
    log::info!("artifacts in {}", dir.display());
    Ok(dir)
}

fn predictions_csv(r: &PredictionReport, dt: f64) -> String {
    let mut out = String::from("horizon,minutes,time,station,predicted_flow,true_flow\n");
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},{:e}",
            row.horizon,
            row.horizon as f64 * dt,
            row.time,
            row.station,
            row.predicted_flow,
            row.true_flow
        );
    }
    out
}

fn write_prediction(dir: &Path, r: &PredictionReport, dt: f64) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let p = dir.join("predictions.csv");
    fs::write(&p, predictions_csv(r, dt)).map_err(|e| io_err(&p, e))?;
    let p = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(r).map_err(|e| CliError::Numerical(e.to_string()))?;
    fs::write(&p, json + "\n").map_err(|e| io_err(&p, e))?;
    print!("{}", report::prediction_table(std::slice::from_ref(r)));
    Ok(())
}

/// Loads a discovery directory as a rollout-ready equation.
pub fn load_model(dir: &Path) -> CliResult<(DiscoveredPde, RunManifest)> {
    let manifest = RunManifest::load(dir)?;
    let ck = Checkpoint::load(&dir.join(artifacts::CHECKPOINT))?;
    let cf = CoefficientFile::load(&dir.join(artifacts::COEFFICIENTS))?;
    let pde = DiscoveredPde::new(
        cf.library()?,
        cf.coefficients()?,
        ck.networks()?,
        ck.normalization,
        manifest.grid,
    )?;
    Ok((pde, manifest))
}

pub fn predict(g: &GlobalArgs, a: &PredictArgs) -> CliResult<PredictionReport> {
    let (pde, manifest) = load_model(&a.model)?;
    if !a.data.exists() {
        return Err(CliError::input(format!("data file {} not found", a.data.display())));
    }
    let data = load_sensor_csv(&a.data, &manifest.grid)?;
    let window = EvaluationWindow::tail(&data.grid, a.eval_fraction, a.horizon)?;
    let r = evaluate_pde(&pde, &data, &window)?;
    if r.clamp_events > 0 {
        log::warn!("{} occupancy values clamped to [0, 100] during rollout", r.clamp_events);
    }
    write_prediction(&out_dir(g, "prediction"), &r, data.grid.dt)?;
    Ok(r)
}

pub fn baseline(g: &GlobalArgs, a: &BaselineArgs) -> CliResult<()> {
    let data = load_data(&a.data, &a.grid)?;
    let window = EvaluationWindow::tail(&data.grid, a.eval_fraction, a.horizon)?;
    match a.kind {
        BaselineKind::Ctm => {
            let ctm = calibrate_ctm(&data)?;
            log::info!(
                "CTM: vf {:.1} mph, w {:.1} mph, capacity {:.0} veh/h, jam {:.1} veh/mi, {} substeps",
                ctm.config.free_flow_speed,
                ctm.config.wave_speed,
                ctm.config.capacity,
                ctm.config.jam_density,
                ctm.substeps
            );
            let r = evaluate_ctm(&ctm, &data, &window, |s| interpolated_row(&data, s))?;
            let dir = out_dir(g, "baseline-ctm");
            write_prediction(&dir, &r, data.grid.dt)?;
            let p = dir.join("calibration.json");
            let json = serde_json::to_string_pretty(&ctm).map_err(|e| CliError::Numerical(e.to_string()))?;
            fs::write(&p, json + "\n").map_err(|e| io_err(&p, e))
        }
        BaselineKind::FirstOrder => {
            let cfg = TrainingConfig {
                pde_order_m: 1,
                ..load_config(g)?
            };
            let target = out_dir(g, "baseline-first-order");
            let staging = Staging::new(&target, a.force)?;
            let mut manifest = manifest_for("baseline first-order", &cfg, &data, &a.data)?;
            let (norm_data, norm) = normalize(&data)?;
            let (pde, trace) = first_order_discovery(&norm_data, &cfg)?;
            let r = evaluate_pde(&pde, &data, &window)?;
            let outputs = DiscoveryOutputs {
                nets: &pde.nets,
                norm: &norm,
                library: &pde.library,
                coefficients: &pde.coefficients,
                trace: &trace,
                data: &data,
                config: &cfg,
            };
            let coeffs = artifacts::write_discovery(&staging, &outputs, &mut manifest)?;
            println!("{}", coeffs.equation);
            let r = PredictionReport {
                model: "first-order PDE".into(),
                ..r
            };
            staging.write("predictions.csv", &predictions_csv(&r, data.grid.dt))?;
            let json = serde_json::to_string_pretty(&r).map_err(|e| CliError::Numerical(e.to_string()))?;
            staging.write("metrics.json", &(json + "\n"))?;
            manifest
                .outputs
                .extend(["predictions.csv".to_string(), "metrics.json".to_string()]);
            artifacts::write_manifest(&staging, &manifest)?;
            staging.commit()?;
            print!("{}", report::prediction_table(std::slice::from_ref(&r)));
            Ok(())
        }
    }
}

pub fn check_derivatives(g: &GlobalArgs, a: &CheckArgs) -> CliResult<()> {
    let cfg = load_config(g)?;
    let seed = g.seed.unwrap_or(0);
    let worst = check::run(&cfg.widths(), seed, a.count)?;
    let mut text = format!("{:<6} {:>12} {:>10}  result\n", "field", "max rel err", "tolerance");
    let mut failed = Vec::new();
    for (c, e) in &worst {
        let tol = check::tolerance(c);
        let ok = *e <= tol;
        if !ok {
            failed.push(*c);
        }
        let _ = writeln!(
            text,
            "{c:<6} {e:>12.3e} {tol:>10.0e}  {}",
            if ok { "ok" } else { "FAIL" }
        );
    }
    print!("{text}");
    std::io::stdout().flush().ok();
    if let Some(p) = &g.out {
        fs::write(p, &text).map_err(|e| io_err(p, e))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "derivative check failed for {}",
            failed.join(", ")
        )))
    }
}

pub fn report(g: &GlobalArgs, a: &ReportArgs) -> CliResult<()> {
    let metrics = a
        .metrics
        .iter()
        .map(|p| report::load_metrics(p))
        .collect::<CliResult<Vec<_>>>()?;
    let r = report::render(&a.dir, &metrics)?;
    print!("{}", r.text);
    let dir = out_dir(g, "report");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    for (name, body) in [("report.txt", &r.text), ("report.svg", &r.svg)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}
