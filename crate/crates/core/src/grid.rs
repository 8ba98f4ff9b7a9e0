//! Spatiotemporal sensor grid: ingestion, aggregation, windowing and
//! normalization of loop-detector records.
//!
//! The grid has `m` evenly spaced station slots along the road (miles) and
//! `n` evenly spaced time steps (minutes since midnight). Observations that
//! are absent from the grid (a missing station, or an empty CSV cell) simply
//! belong to the unobserved set; nothing is interpolated here.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Header line of the sensor CSV format.
pub const CSV_HEADER: &str = "station_id,milepost_miles,timestamp_iso8601,occupancy_pct,flow_veh,speed_mph";

/// Evenly spaced m x n grid over `[x0, xm] x [t0, tm]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatiotemporalGrid {
    pub x0: f64,
    pub xm: f64,
    pub dx: f64,
    pub t0: f64,
    pub tm: f64,
    pub dt: f64,
    pub m: usize,
    pub n: usize,
}

impl SpatiotemporalGrid {
    pub fn new(x0: f64, xm: f64, dx: f64, t0: f64, tm: f64, dt: f64) -> Result<Self> {
        let all = [x0, xm, dx, t0, tm, dt];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite bound".into()));
        }
        if dx <= 0.0 || dt <= 0.0 {
            return Err(Error::InvalidGrid(format!("steps must be positive (dx={dx}, dt={dt})")));
        }
        if xm < x0 || tm < t0 {
            return Err(Error::InvalidGrid("upper bound below lower bound".into()));
        }
        let m = ((xm - x0) / dx).round() as usize + 1;
        let n = ((tm - t0) / dt).round() as usize + 1;
        Ok(Self {
            x0,
            xm,
            dx,
            t0,
            tm,
            dt,
            m,
            n,
        })
    }

    /// Parses the `x0,xm,dx,t0,tm,dt` form used by the `--grid` flag.
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<f64> = spec
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidGrid(format!("`{spec}`: {e}")))?;
        if parts.len() != 6 {
            return Err(Error::InvalidGrid(format!(
                "expected 6 comma-separated values, got {}",
                parts.len()
            )));
        }
        Self::new(parts[0], parts[1], parts[2], parts[3], parts[4], parts[5])
    }

    pub fn position(&self, station: usize) -> f64 {
        self.x0 + station as f64 * self.dx
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }

    pub fn point_count(&self) -> usize {
        self.m * self.n
    }

    /// Index of the grid slot closest to `milepost`, or `None` outside `[x0, xm]`.
    pub fn nearest_station(&self, milepost: f64) -> Option<usize> {
        let tol = 1e-9 * self.dx.max(1.0);
        if milepost < self.x0 - tol || milepost > self.xm + tol {
            return None;
        }
        Some((((milepost - self.x0) / self.dx).round() as usize).min(self.m - 1))
    }

    pub fn nearest_step(&self, minutes: f64) -> Option<usize> {
        let tol = 0.5 * self.dt;
        if minutes < self.t0 - tol || minutes > self.tm + tol {
            return None;
        }
        Some((((minutes - self.t0) / self.dt).round() as usize).min(self.n - 1))
    }
}

/// One detector reading snapped to a grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorObservation {
    pub station_index: usize,
    pub time_index: usize,
    /// Percent, 0-100.
    pub occupancy: f64,
    /// Vehicles per grid interval.
    pub flow: f64,
    /// Miles per hour.
    pub speed: f64,
}

impl SensorObservation {
    fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=100.0).contains(&self.occupancy) {
            return Err(format!("occupancy {} outside [0, 100]", self.occupancy));
        }
        if !(self.flow >= 0.0) {
            return Err(format!("negative or non-finite flow {}", self.flow));
        }
        if !(self.speed >= 0.0) {
            return Err(format!("negative or non-finite speed {}", self.speed));
        }
        if !self.flow.is_finite() || !self.speed.is_finite() {
            return Err("non-finite value".into());
        }
        Ok(())
    }
}

/// Sparse, noisy observations on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorDataset {
    pub grid: SpatiotemporalGrid,
    /// Sorted by (time, station).
    pub observations: Vec<SensorObservation>,
    pub missing_stations: BTreeSet<usize>,
}

impl SensorDataset {
    /// Builds a dataset, enforcing one observation per grid point and
    /// deriving the missing-station set.
    pub fn new(grid: SpatiotemporalGrid, mut observations: Vec<SensorObservation>) -> Result<Self> {
        observations.sort_by_key(|o| (o.time_index, o.station_index));
        for w in observations.windows(2) {
            if w[0].time_index == w[1].time_index && w[0].station_index == w[1].station_index {
                return Err(Error::DuplicateObservation {
                    station: w[0].station_index,
                    time: w[0].time_index,
                    first_row: 0,
                    second_row: 0,
                });
            }
        }
        for o in &observations {
            if o.station_index >= grid.m || o.time_index >= grid.n {
                return Err(Error::InvalidGrid(format!(
                    "observation at ({}, {}) outside {}x{} grid",
                    o.station_index, o.time_index, grid.m, grid.n
                )));
            }
        }
        let present: BTreeSet<usize> = observations.iter().map(|o| o.station_index).collect();
        let missing_stations = (0..grid.m).filter(|s| !present.contains(s)).collect();
        Ok(Self {
            grid,
            observations,
            missing_stations,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn present_stations(&self) -> Vec<usize> {
        (0..self.grid.m)
            .filter(|s| !self.missing_stations.contains(s))
            .collect()
    }

    /// Dense lookup table `[time][station]` of observation indices.
    pub fn index_table(&self) -> Vec<Vec<Option<usize>>> {
        let mut table = vec![vec![None; self.grid.m]; self.grid.n];
        for (i, o) in self.observations.iter().enumerate() {
            table[o.time_index][o.station_index] = Some(i);
        }
        table
    }

    /// Writes the dataset in the sensor CSV schema. Timestamps are rendered on
    /// `date` at the grid time of each observation.
    pub fn write_csv(&self, path: &Path, date: chrono::NaiveDate) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file, date)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, writer: W, date: chrono::NaiveDate) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER.split(','))?;
        for o in &self.observations {
            let minutes = self.grid.time(o.time_index);
            let secs = (minutes * 60.0).round() as i64;
            let ts = date.and_hms_opt(0, 0, 0).expect("midnight") + chrono::Duration::seconds(secs);
            w.write_record([
                format!("S{:03}", o.station_index),
                format!("{}", self.grid.position(o.station_index)),
                ts.format("%Y-%m-%dT%H:%M:%S").to_string(),
                format!("{}", o.occupancy),
                format!("{}", o.flow),
                format!("{}", o.speed),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Minutes since midnight of an ISO-8601 timestamp.
pub fn parse_timestamp_minutes(text: &str) -> Option<f64> {
    let text = text.trim();
    let naive = if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
        dt.naive_local()
    } else {
        ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"]
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(text, f).ok())?
    };
    let t = naive.time();
    Some(t.hour() as f64 * 60.0 + t.minute() as f64 + (t.second() as f64 + t.nanosecond() as f64 * 1e-9) / 60.0)
}

fn parse_optional(cell: &str, row: usize, name: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>().map(Some).map_err(|e| Error::MalformedRow {
        row,
        reason: format!("{name} `{cell}`: {e}"),
    })
}

/// Loads a sensor CSV onto `grid`.
///
/// Rows with an empty numeric cell are skipped; the point joins the
/// unobserved set. Row numbers in errors are 1-based file lines (header = 1).
pub fn load_sensor_csv(path: &Path, grid: &SpatiotemporalGrid) -> Result<SensorDataset> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_sensor_csv(&text, grid)
}

pub fn parse_sensor_csv(text: &str, grid: &SpatiotemporalGrid) -> Result<SensorDataset> {
    let mut observations = Vec::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    for r in parse_rows(text)? {
        let row = r.row;
        let station = snap_station(grid, &r)?;
        let time = grid.nearest_step(r.minutes).ok_or(Error::TimeOutOfRange {
            row,
            minutes: r.minutes,
            t0: grid.t0,
            tm: grid.tm,
        })?;
        if let Some(first_row) = seen.insert((station, time), row) {
            return Err(Error::DuplicateObservation {
                station,
                time,
                first_row,
                second_row: row,
            });
        }
        let (Some(occupancy), Some(flow), Some(speed)) = (r.occupancy, r.flow, r.speed) else {
            continue;
        };
        let obs = SensorObservation {
            station_index: station,
            time_index: time,
            occupancy,
            flow,
            speed,
        };
        obs.validate().map_err(|reason| Error::MalformedRow { row, reason })?;
        observations.push(obs);
    }
    SensorDataset::new(*grid, observations)
}

/// Reads fine-interval detector rows in the sensor CSV schema and aggregates
/// them into the grid's `dt` windows, `[t_j, t_j + dt)` for step `j`.
/// Windows without complete samples stay unobserved.
pub fn aggregate_sensor_csv(text: &str, grid: &SpatiotemporalGrid, fine_interval: f64) -> Result<SensorDataset> {
    check_divisible(fine_interval, grid.dt)?;
    let mut per_station: Vec<Vec<RawSample>> = vec![Vec::new(); grid.m];
    for r in parse_rows(text)? {
        let station = snap_station(grid, &r)?;
        let (Some(occupancy), Some(flow), Some(speed)) = (r.occupancy, r.flow, r.speed) else {
            continue;
        };
        let sample = SensorObservation {
            station_index: station,
            time_index: 0,
            occupancy,
            flow,
            speed,
        };
        sample
            .validate()
            .map_err(|reason| Error::MalformedRow { row: r.row, reason })?;
        per_station[station].push(RawSample {
            minutes: r.minutes,
            occupancy,
            flow,
            speed,
        });
    }
    let mut observations = Vec::new();
    for (station, samples) in per_station.iter().enumerate() {
        let windows = aggregate_span(samples, fine_interval, grid.dt, grid.t0, grid.tm + grid.dt)?;
        for (time, w) in windows.iter().enumerate() {
            if let (Some(occupancy), Some(flow), Some(speed)) = (w.occupancy, w.flow, w.speed) {
                observations.push(SensorObservation {
                    station_index: station,
                    time_index: time,
                    occupancy,
                    flow,
                    speed,
                });
            }
        }
    }
    SensorDataset::new(*grid, observations)
}

struct CsvRow {
    row: usize,
    milepost: f64,
    minutes: f64,
    occupancy: Option<f64>,
    flow: Option<f64>,
    speed: Option<f64>,
}

fn snap_station(grid: &SpatiotemporalGrid, r: &CsvRow) -> Result<usize> {
    grid.nearest_station(r.milepost).ok_or(Error::StationOutOfRange {
        row: r.row,
        milepost: r.milepost,
        x0: grid.x0,
        xm: grid.xm,
    })
}

fn parse_rows(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Ok(Vec::new()),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l.trim().trim_start_matches('\u{feff}'),
        }
    };
    let normalized: String = header.split(',').map(str::trim).collect::<Vec<_>>().join(",");
    if normalized != CSV_HEADER {
        return Err(Error::CsvHeader {
            expected: CSV_HEADER.into(),
            found: header.into(),
        });
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(Error::MalformedRow {
                row,
                reason: format!("expected 6 fields, found {}", cells.len()),
            });
        }
        let milepost: f64 = cells[1].trim().parse().map_err(|e| Error::MalformedRow {
            row,
            reason: format!("milepost `{}`: {e}", cells[1].trim()),
        })?;
        let minutes = parse_timestamp_minutes(cells[2]).ok_or_else(|| Error::MalformedRow {
            row,
            reason: format!("timestamp `{}`", cells[2].trim()),
        })?;
        rows.push(CsvRow {
            row,
            milepost,
            minutes,
            occupancy: parse_optional(cells[3], row, "occupancy")?,
            flow: parse_optional(cells[4], row, "flow")?,
            speed: parse_optional(cells[5], row, "speed")?,
        });
    }
    Ok(rows)
}

/// A fine-interval detector sample, timestamp in minutes since midnight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    pub minutes: f64,
    pub occupancy: f64,
    pub flow: f64,
    pub speed: f64,
}

/// One aggregation window; `None` fields mean no samples fell in it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatedWindow {
    pub start_minutes: f64,
    pub samples: usize,
    pub occupancy: Option<f64>,
    pub flow: Option<f64>,
    pub speed: Option<f64>,
}

impl AggregatedWindow {
    pub fn is_missing(&self) -> bool {
        self.samples == 0
    }
}

/// Aggregates fine samples into `target_dt`-minute windows aligned to
/// midnight, spanning from the first to the last sample's window.
pub fn aggregate(raw: &[RawSample], fine_interval: f64, target_dt: f64) -> Result<Vec<AggregatedWindow>> {
    check_divisible(fine_interval, target_dt)?;
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let first = raw.iter().map(|s| s.minutes).fold(f64::INFINITY, f64::min);
    let last = raw.iter().map(|s| s.minutes).fold(f64::NEG_INFINITY, f64::max);
    let start = (first / target_dt + 1e-9).floor() * target_dt;
    let end = ((last / target_dt + 1e-9).floor() + 1.0) * target_dt;
    aggregate_span(raw, fine_interval, target_dt, start, end)
}

/// Aggregates over the explicit span `[start, end)`; samples outside it are ignored.
pub fn aggregate_span(
    raw: &[RawSample],
    fine_interval: f64,
    target_dt: f64,
    start: f64,
    end: f64,
) -> Result<Vec<AggregatedWindow>> {
    check_divisible(fine_interval, target_dt)?;
    let count = ((end - start) / target_dt).round().max(0.0) as usize;
    let mut buckets: Vec<Vec<&RawSample>> = vec![Vec::new(); count];
    for s in raw {
        let k = ((s.minutes - start) / target_dt + 1e-9).floor();
        if k >= 0.0 && (k as usize) < count {
            buckets[k as usize].push(s);
        }
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(k, samples)| {
            let start_minutes = start + k as f64 * target_dt;
            if samples.is_empty() {
                return AggregatedWindow {
                    start_minutes,
                    samples: 0,
                    occupancy: None,
                    flow: None,
                    speed: None,
                };
            }
            let n = samples.len() as f64;
            let flow: f64 = samples.iter().map(|s| s.flow).sum();
            let occupancy = samples.iter().map(|s| s.occupancy).sum::<f64>() / n;
            let speed = if flow > 0.0 {
                samples.iter().map(|s| s.flow * s.speed).sum::<f64>() / flow
            } else {
                samples.iter().map(|s| s.speed).sum::<f64>() / n
            };
            AggregatedWindow {
                start_minutes,
                samples: samples.len(),
                occupancy: Some(occupancy),
                flow: Some(flow),
                speed: Some(speed),
            }
        })
        .collect())
}

fn check_divisible(fine: f64, target: f64) -> Result<()> {
    let ratio = target / fine;
    if !(fine > 0.0) || !(target > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
        return Err(Error::NonDivisibleInterval { fine, target });
    }
    Ok(())
}

/// Restricts a dataset to time steps `[t_start, t_end]` (inclusive) and
/// rebases the grid so that `t_start` becomes step 0.
pub fn window(ds: &SensorDataset, t_start: usize, t_end: usize) -> Result<SensorDataset> {
    if t_start >= t_end || t_end >= ds.grid.n {
        return Err(Error::InvalidWindow {
            start: t_start,
            end: t_end,
            n: ds.grid.n,
        });
    }
    let g = ds.grid;
    let grid = SpatiotemporalGrid {
        t0: g.time(t_start),
        tm: g.time(t_end),
        n: t_end - t_start + 1,
        ..g
    };
    let observations = ds
        .observations
        .iter()
        .filter(|o| (t_start..=t_end).contains(&o.time_index))
        .map(|o| SensorObservation {
            time_index: o.time_index - t_start,
            ..*o
        })
        .collect();
    SensorDataset::new(grid, observations)
}

/// Affine map `normalized = (value - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: f64,
    pub scale: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { shift: 0.0, scale: 1.0 };

    pub fn apply(&self, value: f64) -> f64 {
        (value - self.shift) / self.scale
    }

    pub fn invert(&self, normalized: f64) -> f64 {
        normalized * self.scale + self.shift
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub x: Affine,
    pub t: Affine,
    pub o: Affine,
    pub q: Affine,
    pub v: Affine,
}

/// A grid point in normalized units. `station`/`time` keep the grid indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPoint {
    pub station: usize,
    pub time: usize,
    pub x: f64,
    pub t: f64,
    pub o: f64,
    pub q: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDataset {
    pub grid: SpatiotemporalGrid,
    pub params: NormalizationParams,
    pub points: Vec<NormalizedPoint>,
    pub missing_stations: BTreeSet<usize>,
}

impl NormalizedDataset {
    pub fn x_of(&self, station: usize) -> f64 {
        self.params.x.apply(self.grid.position(station))
    }

    pub fn t_of(&self, step: usize) -> f64 {
        self.params.t.apply(self.grid.time(step))
    }

    /// Every grid point in normalized coordinates, row-major by time.
    pub fn all_coordinates(&self) -> Vec<(f64, f64)> {
        (0..self.grid.n)
            .flat_map(|j| (0..self.grid.m).map(move |i| (i, j)))
            .map(|(i, j)| (self.x_of(i), self.t_of(j)))
            .collect()
    }

    /// Maps the normalized points back to physical observations.
    pub fn denormalize(&self) -> Vec<SensorObservation> {
        self.points
            .iter()
            .map(|p| SensorObservation {
                station_index: p.station,
                time_index: p.time,
                occupancy: self.params.o.invert(p.o),
                flow: self.params.q.invert(p.q),
                speed: self.params.v.invert(p.v),
            })
            .collect()
    }
}

fn range_affine(lo: f64, hi: f64) -> Affine {
    let half = 0.5 * (hi - lo);
    Affine {
        shift: 0.5 * (hi + lo),
        scale: if half > 0.0 { half } else { 1.0 },
    }
}

fn standardizing_affine(values: impl Iterator<Item = f64> + Clone, name: &str) -> Affine {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 * mean.abs().max(1.0) {
        Affine {
            shift: mean,
            scale: std,
        }
    } else {
        log::warn!("field {name} has zero variance; using unit scale");
        Affine {
            shift: mean,
            scale: 1.0,
        }
    }
}

/// Maps x and t to [-1, 1] over the grid bounds and standardizes o, q, v
/// over the observed points.
pub fn normalize(ds: &SensorDataset) -> Result<(NormalizedDataset, NormalizationParams)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let obs = &ds.observations;
    let params = NormalizationParams {
        x: range_affine(ds.grid.x0, ds.grid.xm),
        t: range_affine(ds.grid.t0, ds.grid.tm),
        o: standardizing_affine(obs.iter().map(|o| o.occupancy), "occupancy"),
        q: standardizing_affine(obs.iter().map(|o| o.flow), "flow"),
        v: standardizing_affine(obs.iter().map(|o| o.speed), "speed"),
    };
    let points = obs
        .iter()
        .map(|o| NormalizedPoint {
            station: o.station_index,
            time: o.time_index,
            x: params.x.apply(ds.grid.position(o.station_index)),
            t: params.t.apply(ds.grid.time(o.time_index)),
            o: params.o.apply(o.occupancy),
            q: params.q.apply(o.flow),
            v: params.v.apply(o.speed),
        })
        .collect();
    Ok((
        NormalizedDataset {
            grid: ds.grid,
            params,
            points,
            missing_stations: ds.missing_stations.clone(),
        },
        params,
    ))
}
