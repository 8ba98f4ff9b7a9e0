//! Artifact directories, run manifests and the CSV grids written by `discover`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use traffic_pde::derivatives::states;
use traffic_pde::library::rhs;
use traffic_pde::rational::reconstruct_fields;
use traffic_pde::{
    CoefficientFile, Coefficients, FieldTriplet, NormalizationParams, SensorDataset, SpatiotemporalGrid, TermLibrary,
    TrainingConfig,
};

use crate::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const COEFFICIENTS: &str = "coefficients.json";
pub const TRACE: &str = "trace.csv";
pub const RECONSTRUCTION: &str = "reconstruction.csv";
pub const DERIVATIVES: &str = "derivatives.csv";
pub const DT_COMPARISON: &str = "dt_comparison.csv";

/// Files of a discovery directory, manifest last.
pub const DISCOVERY_FILES: [&str; 7] = [
    CHECKPOINT,
    COEFFICIENTS,
    TRACE,
    RECONSTRUCTION,
    DERIVATIVES,
    DT_COMPARISON,
    MANIFEST,
];

/// Provenance of one artifact directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: TrainingConfig,
    pub grid: SpatiotemporalGrid,
    pub data_path: String,
    pub data_sha256: String,
    pub tool_version: String,
    pub core_version: String,
    pub started_utc: String,
    pub finished_utc: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }
}

pub fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::input(format!("{}: {e}", path.display()))
}

/// A sibling directory that replaces `target` only once every file is written.
pub struct Staging {
    target: PathBuf,
    tmp: PathBuf,
}

impl Staging {
    pub fn new(target: &Path, force: bool) -> CliResult<Self> {
        if target.exists() && !force {
            return Err(CliError::input(format!(
                "{} already exists (use --force to replace it)",
                target.display()
            )));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::input(format!("bad output directory {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| io_err(&parent, e))?;
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
        }
        fs::create_dir(&tmp).map_err(|e| io_err(&tmp, e))?;
        Ok(Self {
            target: target.to_path_buf(),
            tmp,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.tmp.join(file)
    }

    pub fn write(&self, file: &str, contents: &str) -> CliResult<()> {
        let p = self.path(file);
        fs::write(&p, contents).map_err(|e| io_err(&p, e))
    }

    pub fn commit(self) -> CliResult<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| io_err(&self.target, e))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(|e| io_err(&self.target, e))?;
        let target = self.target.clone();
        std::mem::forget(self);
        Ok(target)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.tmp);
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Observed and reconstructed fields at every grid point, physical units.
pub fn reconstruction_csv(nets: &FieldTriplet, norm: &NormalizationParams, data: &SensorDataset) -> CliResult<String> {
    let g = &data.grid;
    let table = data.index_table();
    let mut out = String::from("time,station,milepost,minutes,o_obs,o_hat,q_obs,q_hat,v_obs,v_hat\n");
    for (j, row) in table.iter().enumerate() {
        let t = norm.t.apply(g.time(j));
        for (s, idx) in row.iter().enumerate() {
            let x = norm.x.apply(g.position(s));
            let (o, q, v) = reconstruct_fields(nets, x, t)?;
            let obs = idx.map(|i| data.observations[i]);
            let _ = writeln!(
                out,
                "{j},{s},{},{},{},{:e},{},{:e},{},{:e}",
                g.position(s),
                g.time(j),
                cell(obs.map(|o| o.occupancy)),
                norm.o.invert(o),
                cell(obs.map(|o| o.flow)),
                norm.q.invert(q),
                cell(obs.map(|o| o.speed)),
                norm.v.invert(v),
            );
        }
    }
    Ok(out)
}

fn grid_coords(grid: &SpatiotemporalGrid, norm: &NormalizationParams) -> Vec<(f64, f64)> {
    (0..grid.n)
        .flat_map(|j| (0..grid.m).map(move |s| (s, j)))
        .map(|(s, j)| (norm.x.apply(grid.position(s)), norm.t.apply(grid.time(j))))
        .collect()
}

/// Spatial derivatives of the reconstructed fields (per mile) and the
/// occupancy time derivative (per grid step), at every grid point.
pub fn derivatives_csv(
    nets: &FieldTriplet,
    norm: &NormalizationParams,
    grid: &SpatiotemporalGrid,
    config: &TrainingConfig,
) -> CliResult<String> {
    let batch = states(nets, &grid_coords(grid, norm), &config.engine())?;
    let sx = norm.x.scale;
    let (so, sq, sv) = (norm.o.scale, norm.q.scale, norm.v.scale);
    let per_step = so / norm.t.scale * grid.dt;
    let mut out = String::from("time,station,milepost,minutes,o_x,q_x,v_x,o_xx,q_xx,v_xx,o_t\n");
    for j in 0..grid.n {
        for s in 0..grid.m {
            let p = batch.get(j * grid.m + s);
            let _ = writeln!(
                out,
                "{j},{s},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                grid.position(s),
                grid.time(j),
                p.o_x * so / sx,
                p.q_x * sq / sx,
                p.v_x * sv / sx,
                p.o_xx * so / (sx * sx),
                p.q_xx * sq / (sx * sx),
                p.v_xx * sv / (sx * sx),
                p.o_t * per_step,
            );
        }
    }
    Ok(out)
}

/// Network `∂t o` against the discovered right-hand side at every grid
/// point, both in occupancy percent per grid step.
pub fn dt_comparison_csv(
    nets: &FieldTriplet,
    norm: &NormalizationParams,
    grid: &SpatiotemporalGrid,
    lib: &TermLibrary,
    xi: &Coefficients,
    config: &TrainingConfig,
) -> CliResult<String> {
    let batch = states(nets, &grid_coords(grid, norm), &config.engine())?;
    let per_step = norm.o.scale / norm.t.scale * grid.dt;
    let eval = lib.evaluator();
    let mut theta = vec![0.0; lib.len()];
    let mut out = String::from("time,station,milepost,minutes,o_t_network,o_t_pde,residual\n");
    for j in 0..grid.n {
        for s in 0..grid.m {
            let p = batch.get(j * grid.m + s);
            eval.eval_into(&p.library_inputs(), &mut theta);
            let lhs = p.o_t * per_step;
            let rhs = rhs(&theta, xi)? * per_step;
            let _ = writeln!(
                out,
                "{j},{s},{},{},{lhs:e},{rhs:e},{:e}",
                grid.position(s),
                grid.time(j),
                lhs - rhs
            );
        }
    }
    Ok(out)
}

/// Everything a finished discovery run leaves behind.
pub struct DiscoveryOutputs<'a> {
    pub nets: &'a FieldTriplet,
    pub norm: &'a NormalizationParams,
    pub library: &'a TermLibrary,
    pub coefficients: &'a Coefficients,
    pub trace: &'a traffic_pde::TrainingTrace,
    pub data: &'a SensorDataset,
    pub config: &'a TrainingConfig,
}

/// Writes the seven discovery files into `staging`; returns the coefficient file.
pub fn write_discovery(
    staging: &Staging,
    o: &DiscoveryOutputs<'_>,
    manifest: &mut RunManifest,
) -> CliResult<CoefficientFile> {
    traffic_pde::Checkpoint::new(o.nets, *o.norm).save(&staging.path(CHECKPOINT))?;
    let coeffs = CoefficientFile::new(o.library, o.coefficients, o.norm, o.data.grid.dt)?;
    coeffs.save(&staging.path(COEFFICIENTS))?;
    o.trace.save(&staging.path(TRACE))?;
    staging.write(RECONSTRUCTION, &reconstruction_csv(o.nets, o.norm, o.data)?)?;
    staging.write(DERIVATIVES, &derivatives_csv(o.nets, o.norm, &o.data.grid, o.config)?)?;
    staging.write(
        DT_COMPARISON,
        &dt_comparison_csv(o.nets, o.norm, &o.data.grid, o.library, o.coefficients, o.config)?,
    )?;
    manifest.outputs = DISCOVERY_FILES.iter().map(|s| s.to_string()).collect();
    manifest.finished_utc = now_utc();
    write_manifest(staging, manifest)?;
    Ok(coeffs)
}

pub fn write_manifest(staging: &Staging, manifest: &RunManifest) -> CliResult<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::Numerical(e.to_string()))?;
    staging.write(MANIFEST, &(text + "\n"))
}
