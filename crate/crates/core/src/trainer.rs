//! Three-phase training of the field networks and the coefficient vector.
//!
//! Burn-in minimizes the data and PDE losses, the main phase adds the L1
//! penalty and prunes small coefficients every `threshold_frequency` epochs,
//! and refinement returns to the burn-in objective with the mask frozen.
//! Gradients are full batch and reduced in a fixed order.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::derivatives::{accumulate_gradient, states, EngineOptions, SecondOrderFormula, StateBatch};
use crate::error::{Error, Result};
use crate::grid::NormalizedDataset;
use crate::library::{enumerate_terms, Coefficients, TermLibrary, ThetaEvaluator, VARIABLES};
use crate::rational::{init_networks, FieldTriplet, NetworkWidths};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eta_o: f64,
    pub eta_q: f64,
    pub eta_v: f64,
    pub eta_pde: f64,
    pub eta_spar: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta_o: 2.0,
            eta_q: 0.04,
            eta_v: 0.6,
            eta_pde: 10.0,
            eta_spar: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.eta_o, self.eta_q, self.eta_v, self.eta_pde, self.eta_spar];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub burn_in_epochs: usize,
    pub main_epochs: usize,
    pub refine_epochs: usize,
    pub threshold: f64,
    pub threshold_frequency: usize,
    pub learning_rate: f64,
    pub lr_shrink: f64,
    pub lr_step: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            burn_in_epochs: 1000,
            main_epochs: 2500,
            refine_epochs: 1500,
            threshold: 0.0005,
            threshold_frequency: 400,
            learning_rate: 0.001,
            lr_shrink: 0.9,
            lr_step: 500,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn total_epochs(&self) -> usize {
        self.burn_in_epochs + self.main_epochs + self.refine_epochs
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSchedule(msg));
        if !(self.threshold >= 0.0) {
            return bad(format!("threshold {} must be >= 0", self.threshold));
        }
        if self.threshold_frequency == 0 {
            return bad("threshold frequency must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if !(self.lr_shrink > 0.0 && self.lr_shrink <= 1.0) {
            return bad(format!("lr shrink {} outside (0, 1]", self.lr_shrink));
        }
        if self.lr_step == 0 {
            return bad("lr step must be >= 1".into());
        }
        Ok(())
    }

    /// Learning rate in effect at a global epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_shrink.powi((epoch / self.lr_step) as i32)
    }

    pub fn phase_of(&self, epoch: usize) -> Option<(Phase, usize)> {
        if epoch < self.burn_in_epochs {
            Some((Phase::BurnIn, epoch))
        } else if epoch < self.burn_in_epochs + self.main_epochs {
            Some((Phase::Main, epoch - self.burn_in_epochs))
        } else if epoch < self.total_epochs() {
            Some((Phase::Refine, epoch - self.burn_in_epochs - self.main_epochs))
        } else {
            None
        }
    }
}

/// Points where the PDE residual is penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Collocation {
    /// Observed points only.
    #[default]
    Observed,
    /// Every grid point, including missing stations.
    All,
}

/// Training configuration file. Keys follow the hyperparameter names of the
/// method (`eta_k` is accepted for `eta_o`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub lr_shrink_rate: f64,
    pub lr_step_size: usize,
    pub width_f_o: Vec<usize>,
    pub width_f_q: Vec<usize>,
    pub width_f_v: Vec<usize>,
    pub poly_ord_r_n: usize,
    pub poly_ord_r_d: usize,
    #[serde(alias = "eta_k")]
    pub eta_o: f64,
    pub eta_q: f64,
    pub eta_v: f64,
    pub eta_pde: f64,
    pub eta_spar: f64,
    pub pde_order_m: u32,
    pub poly_order_n: u32,
    pub coeff_thresh: f64,
    pub thresh_freq: usize,
    pub burn_in_epochs: usize,
    pub main_epochs: usize,
    pub refine_epochs: usize,
    pub seed: u64,
    pub collocation: Collocation,
    pub second_order_formula: SecondOrderFormula,
    pub chunk_size: usize,
    /// Log a progress line every this many epochs (0 disables).
    pub log_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let s = Schedule::default();
        let n = NetworkWidths::default();
        Self {
            learning_rate: s.learning_rate,
            lr_shrink_rate: s.lr_shrink,
            lr_step_size: s.lr_step,
            width_f_o: n.occupancy,
            width_f_q: n.flow,
            width_f_v: n.speed,
            poly_ord_r_n: 3,
            poly_ord_r_d: 2,
            eta_o: w.eta_o,
            eta_q: w.eta_q,
            eta_v: w.eta_v,
            eta_pde: w.eta_pde,
            eta_spar: w.eta_spar,
            pde_order_m: 2,
            poly_order_n: 2,
            coeff_thresh: s.threshold,
            thresh_freq: s.threshold_frequency,
            burn_in_epochs: s.burn_in_epochs,
            main_epochs: s.main_epochs,
            refine_epochs: s.refine_epochs,
            seed: s.seed,
            collocation: Collocation::Observed,
            second_order_formula: SecondOrderFormula::Full,
            chunk_size: EngineOptions::default().chunk_size,
            log_every: 100,
        }
    }
}

impl TrainingConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            eta_o: self.eta_o,
            eta_q: self.eta_q,
            eta_v: self.eta_v,
            eta_pde: self.eta_pde,
            eta_spar: self.eta_spar,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            burn_in_epochs: self.burn_in_epochs,
            main_epochs: self.main_epochs,
            refine_epochs: self.refine_epochs,
            threshold: self.coeff_thresh,
            threshold_frequency: self.thresh_freq,
            learning_rate: self.learning_rate,
            lr_shrink: self.lr_shrink_rate,
            lr_step: self.lr_step_size,
            seed: self.seed,
        }
    }

    pub fn widths(&self) -> NetworkWidths {
        NetworkWidths {
            occupancy: self.width_f_o.clone(),
            flow: self.width_f_q.clone(),
            speed: self.width_f_v.clone(),
        }
    }

    pub fn engine(&self) -> EngineOptions {
        EngineOptions {
            formula: self.second_order_formula,
            chunk_size: self.chunk_size,
        }
    }

    pub fn library(&self) -> Result<TermLibrary> {
        enumerate_terms(self.poly_order_n, self.pde_order_m)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        self.schedule().validate()?;
        self.library()?;
        if (self.poly_ord_r_n, self.poly_ord_r_d) != (3, 2) {
            // the ReLU-approximant initialization exists only for this order
            return Err(Error::Config(format!(
                "rational order ({}, {}) unsupported; only (3, 2)",
                self.poly_ord_r_n, self.poly_ord_r_d
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "burn-in")]
    BurnIn,
    #[serde(rename = "main")]
    Main,
    #[serde(rename = "refine")]
    Refine,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::BurnIn => "burn-in",
            Phase::Main => "main",
            Phase::Refine => "refine",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "burn-in" => Ok(Phase::BurnIn),
            "main" => Ok(Phase::Main),
            "refine" => Ok(Phase::Refine),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

/// One epoch. Losses are evaluated at the parameters the epoch's update
/// started from; `active_terms` is counted after the update and any
/// thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub l_o: f64,
    pub l_q: f64,
    pub l_v: f64,
    pub l_pde: f64,
    pub l_spar: f64,
    pub total: f64,
    pub active_terms: usize,
    pub learning_rate: f64,
    pub thresholded: bool,
}

const TRACE_HEADER: &str = "epoch,phase,l_o,l_q,l_v,l_pde,l_spar,total,active_terms,learning_rate,thresholded";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn write_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e},{}",
                r.epoch,
                r.phase,
                r.l_o,
                r.l_q,
                r.l_v,
                r.l_pde,
                r.l_spar,
                r.total,
                r.active_terms,
                r.learning_rate,
                u8::from(r.thresholded)
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
        if header != TRACE_HEADER {
            return Err(Error::CsvHeader {
                expected: TRACE_HEADER.into(),
                found: header,
            });
        }
        let mut records = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |reason: String| Error::MalformedRow { row: row + 2, reason };
            let f = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(format!("column {i}: `{}`", &rec[i]))) };
            let u =
                |i: usize| -> Result<usize> { rec[i].parse().map_err(|_| bad(format!("column {i}: `{}`", &rec[i]))) };
            records.push(EpochRecord {
                epoch: u(0)?,
                phase: rec[1].parse()?,
                l_o: f(2)?,
                l_q: f(3)?,
                l_v: f(4)?,
                l_pde: f(5)?,
                l_spar: f(6)?,
                total: f(7)?,
                active_terms: u(8)?,
                learning_rate: f(9)?,
                thresholded: u(10)? != 0,
            });
        }
        Ok(Self { records })
    }
}

/// Mean squared reconstruction errors `(L_o, L_q, L_v)` over the observed points.
pub fn data_loss(nets: &FieldTriplet, data: &NormalizedDataset, opts: &EngineOptions) -> Result<(f64, f64, f64)> {
    if data.points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let coords: Vec<(f64, f64)> = data.points.iter().map(|p| (p.x, p.t)).collect();
    let s = states(nets, &coords, opts)?;
    let (mut lo, mut lq, mut lv) = (0.0, 0.0, 0.0);
    for (i, p) in data.points.iter().enumerate() {
        lo += (s.o[i] - p.o).powi(2);
        lq += (s.q[i] - p.q).powi(2);
        lv += (s.v[i] - p.v).powi(2);
    }
    let n = data.points.len() as f64;
    Ok((lo / n, lq / n, lv / n))
}

/// Mean squared PDE residual `(∂t ô - Θᵀξ)²` over `coords`.
pub fn pde_loss(
    nets: &FieldTriplet,
    lib: &TermLibrary,
    xi: &Coefficients,
    coords: &[(f64, f64)],
    opts: &EngineOptions,
) -> Result<f64> {
    if coords.is_empty() {
        return Err(Error::Config("empty collocation set".into()));
    }
    if xi.len() != lib.len() {
        return Err(Error::LengthMismatch {
            expected: lib.len(),
            got: xi.len(),
        });
    }
    let s = states(nets, coords, opts)?;
    let eval = lib.evaluator();
    let mut theta = vec![0.0; lib.len()];
    let mut sum = 0.0;
    for i in 0..s.len() {
        let st = s.get(i);
        eval.eval_into(&st.library_inputs(), &mut theta);
        let rhs: f64 = theta.iter().zip(xi.values()).map(|(a, b)| a * b).sum();
        sum += (st.o_t - rhs).powi(2);
    }
    Ok(sum / coords.len() as f64)
}

/// L1 norm over the active coefficients.
pub fn sparsity_loss(xi: &Coefficients) -> f64 {
    xi.l1()
}

/// Deactivates every active coefficient with `|value| < tau`.
pub fn threshold_xi(xi: &Coefficients, tau: f64) -> Coefficients {
    let mut out = xi.clone();
    for i in xi.active_indices() {
        if xi.values()[i].abs() < tau {
            out.deactivate(i);
        }
    }
    out
}

/// Per-point targets aligned with the collocation coordinates.
struct Problem {
    coords: Vec<(f64, f64)>,
    targets: Vec<Option<[f64; 3]>>,
    observed: usize,
}

impl Problem {
    fn new(data: &NormalizedDataset, collocation: Collocation) -> Result<Self> {
        if data.points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        match collocation {
            Collocation::Observed => Ok(Self {
                coords: data.points.iter().map(|p| (p.x, p.t)).collect(),
                targets: data.points.iter().map(|p| Some([p.o, p.q, p.v])).collect(),
                observed: data.points.len(),
            }),
            Collocation::All => {
                let m = data.grid.m;
                let mut targets = vec![None; m * data.grid.n];
                for p in &data.points {
                    targets[p.time * m + p.station] = Some([p.o, p.q, p.v]);
                }
                Ok(Self {
                    coords: data.all_coordinates(),
                    targets,
                    observed: data.points.len(),
                })
            }
        }
    }
}

/// Loss components at the current parameters plus the gradient of the
/// phase objective without the sparsity term.
struct Evaluation {
    l_o: f64,
    l_q: f64,
    l_v: f64,
    l_pde: f64,
    grad_nets: Vec<f64>,
    grad_xi: Vec<f64>,
}

fn evaluate(
    nets: &FieldTriplet,
    eval: &ThetaEvaluator,
    xi: &Coefficients,
    problem: &Problem,
    w: &LossWeights,
    opts: &EngineOptions,
) -> Result<Evaluation> {
    let h = xi.len();
    let n_obs = problem.observed as f64;
    let n_col = problem.coords.len() as f64;
    let values = xi.values();
    let loss = |offset: usize, s: &StateBatch| -> Result<(Vec<f64>, StateBatch)> {
        // [sum r_o², sum r_q², sum r_v², sum r_pde², dL/dxi ...]
        let mut partial = vec![0.0; 4 + h];
        let mut ct = StateBatch::zeros(s.len());
        let mut theta = vec![0.0; h];
        for i in 0..s.len() {
            if let Some([o, q, v]) = problem.targets[offset + i] {
                let (ro, rq, rv) = (s.o[i] - o, s.q[i] - q, s.v[i] - v);
                partial[0] += ro * ro;
                partial[1] += rq * rq;
                partial[2] += rv * rv;
                ct.o[i] += 2.0 * w.eta_o * ro / n_obs;
                ct.q[i] += 2.0 * w.eta_q * rq / n_obs;
                ct.v[i] += 2.0 * w.eta_v * rv / n_obs;
            }
            let inputs: [f64; VARIABLES] = [
                s.o[i], s.q[i], s.v[i], s.o_x[i], s.q_x[i], s.v_x[i], s.o_xx[i], s.q_xx[i], s.v_xx[i],
            ];
            eval.eval_into(&inputs, &mut theta);
            let rhs: f64 = theta.iter().zip(values).map(|(a, b)| a * b).sum();
            let r = s.o_t[i] - rhs;
            partial[3] += r * r;
            let g = 2.0 * w.eta_pde * r / n_col;
            for (d, th) in partial[4..].iter_mut().zip(&theta) {
                *d -= g * th;
            }
            ct.o_t[i] += g;
            let gi = eval.weighted_gradient(&inputs, values);
            let slots = [
                &mut ct.o,
                &mut ct.q,
                &mut ct.v,
                &mut ct.o_x,
                &mut ct.q_x,
                &mut ct.v_x,
                &mut ct.o_xx,
                &mut ct.q_xx,
                &mut ct.v_xx,
            ];
            for (slot, d) in slots.into_iter().zip(gi) {
                slot[i] -= g * d;
            }
        }
        Ok((partial, ct))
    };
    let (sums, grads) = accumulate_gradient(nets, &problem.coords, opts, &loss)?;
    let mut grad_nets = Vec::with_capacity(nets.param_count());
    for part in grads.parts() {
        grad_nets.extend_from_slice(part);
    }
    let mut grad_xi = sums[4..].to_vec();
    for (g, &a) in grad_xi.iter_mut().zip(xi.active()) {
        if !a {
            *g = 0.0;
        }
    }
    Ok(Evaluation {
        l_o: sums[0] / n_obs,
        l_q: sums[1] / n_obs,
        l_v: sums[2] / n_obs,
        l_pde: sums[3] / n_col,
        grad_nets,
        grad_xi,
    })
}

/// Adam with the usual defaults (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Updates `params[i]` for every `i` where `mask(i)` holds.
    fn update(&mut self, params: &mut [&mut [f64]], grad: &[f64], lr: f64, mask: impl Fn(usize) -> bool) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let mut k = 0;
        for block in params.iter_mut() {
            for p in block.iter_mut() {
                if mask(k) {
                    let g = grad[k];
                    self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * g;
                    self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * g * g;
                    let mh = self.m[k] / c1;
                    let vh = self.v[k] / c2;
                    *p -= lr * mh / (vh.sqrt() + Self::EPS);
                }
                k += 1;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub nets: FieldTriplet,
    pub coefficients: Coefficients,
    pub trace: TrainingTrace,
    pub library: TermLibrary,
}

/// Trains freshly initialized networks (seeded by the schedule) on `data`.
pub fn train(data: &NormalizedDataset, config: &TrainingConfig) -> Result<TrainingResult> {
    config.validate()?;
    let nets = init_networks(&config.widths(), config.seed)?;
    let lib = config.library()?;
    let xi = Coefficients::zeros(lib.len());
    train_from(nets, xi, lib, data, config)
}

/// Trains from the given networks and coefficients.
pub fn train_from(
    mut nets: FieldTriplet,
    mut xi: Coefficients,
    lib: TermLibrary,
    data: &NormalizedDataset,
    config: &TrainingConfig,
) -> Result<TrainingResult> {
    config.validate()?;
    if xi.len() != lib.len() {
        return Err(Error::LengthMismatch {
            expected: lib.len(),
            got: xi.len(),
        });
    }
    let schedule = config.schedule();
    let w = config.weights();
    let opts = config.engine();
    let problem = Problem::new(data, config.collocation)?;
    let eval = lib.evaluator();
    let n_net = nets.param_count();
    let mut adam = Adam::new(n_net + xi.len());
    let mut trace = TrainingTrace::default();
    let mut warned_empty = false;

    for epoch in 0..schedule.total_epochs() {
        let (phase, k) = schedule.phase_of(epoch).expect("epoch within schedule");
        let lr = schedule.learning_rate_at(epoch);
        let ev = evaluate(&nets, &eval, &xi, &problem, &w, &opts).map_err(|e| match e {
            Error::NonFiniteGradient(_) | Error::DegenerateActivation { .. } | Error::NonFinite(_) => {
                log::error!("epoch {epoch} ({phase}): {e}");
                Error::NonFiniteLoss {
                    epoch,
                    phase: phase.to_string(),
                    trace: Box::new(trace.clone()),
                }
            }
            other => other,
        })?;
        let l_spar = sparsity_loss(&xi);
        let spar_weight = if phase == Phase::Main { w.eta_spar } else { 0.0 };
        let total =
            w.eta_o * ev.l_o + w.eta_q * ev.l_q + w.eta_v * ev.l_v + w.eta_pde * ev.l_pde + spar_weight * l_spar;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                phase: phase.to_string(),
                trace: Box::new(trace),
            });
        }

        let mut grad = ev.grad_nets;
        grad.extend(ev.grad_xi.iter().zip(xi.values()).map(|(g, &p)| {
            // subgradient of |p| is 0 at 0
            let s = if p > 0.0 {
                1.0
            } else if p < 0.0 {
                -1.0
            } else {
                0.0
            };
            g + spar_weight * s
        }));
        let active = xi.active().to_vec();
        let mut values = xi.values().to_vec();
        {
            let [o, q, v] = nets.nets_mut();
            let mut blocks: [&mut [f64]; 4] = [o.params_mut(), q.params_mut(), v.params_mut(), &mut values];
            adam.update(&mut blocks, &grad, lr, |i| i < n_net || active[i - n_net]);
        }
        xi = Coefficients::new(values, active)?;

        let thresholded = phase == Phase::Main && (k + 1) % schedule.threshold_frequency == 0;
        if thresholded {
            let before = xi.active_count();
            xi = threshold_xi(&xi, schedule.threshold);
            log::info!(
                "epoch {epoch}: thresholding removed {} terms, {} remain",
                before - xi.active_count(),
                xi.active_count()
            );
            if xi.active_count() == 0 && !warned_empty {
                log::warn!("every library term has been thresholded; the discovered PDE is ∂t o = 0");
                warned_empty = true;
            }
        }
        let record = EpochRecord {
            epoch,
            phase,
            l_o: ev.l_o,
            l_q: ev.l_q,
            l_v: ev.l_v,
            l_pde: ev.l_pde,
            l_spar,
            total,
            active_terms: xi.active_count(),
            learning_rate: lr,
            thresholded,
        };
        if config.log_every > 0 && (epoch % config.log_every == 0 || epoch + 1 == schedule.total_epochs()) {
            log::info!(
                "epoch {epoch:>5} {phase:<7} total {total:.3e} L_o {:.3e} L_q {:.3e} L_v {:.3e} L_pde {:.3e} active {}",
                ev.l_o,
                ev.l_q,
                ev.l_v,
                ev.l_pde,
                record.active_terms
            );
        }
        trace.records.push(record);
    }
    Ok(TrainingResult {
        nets,
        coefficients: xi,
        trace,
        library: lib,
    })
}
