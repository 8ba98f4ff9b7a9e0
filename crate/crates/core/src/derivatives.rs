//! Exact input derivatives of the reconstructed fields and parameter
//! gradients of losses built from them.
//!
//! The occupancy network is differentiated along `x` and `t` directly. The
//! flow and speed networks see `(o, x, t)`; their partials along the
//! occupancy input and the position input are propagated separately and
//! then assembled with the chain rule:
//!
//! ```text
//! q_x  = q_o o_x + q_phi
//! q_xx = q_oo o_x^2 + 2 q_ophi o_x + q_phiphi + q_o o_xx
//! ```
//!
//! [`SecondOrderFormula::Literal`] drops the mixed `2 q_ophi o_x` term; it is
//! kept as a diagnostic. An independent route ([`composite_jet`]) pushes the
//! occupancy jet straight through the dependent network and is used as an
//! oracle for the assembly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rational::{FieldTriplet, RationalMlp};
use crate::taylor::{self, JetLayout, JetTape};

/// Value and derivatives of one field at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Jet2 {
    pub value: f64,
    pub d_dx: f64,
    pub d_dt: f64,
    pub d2_dx2: f64,
}

/// Inputs of the discovered equation at one point, plus its left-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateAtPoint {
    pub o: f64,
    pub q: f64,
    pub v: f64,
    pub o_x: f64,
    pub q_x: f64,
    pub v_x: f64,
    pub o_xx: f64,
    pub q_xx: f64,
    pub v_xx: f64,
    pub o_t: f64,
}

impl StateAtPoint {
    /// The nine library variables in their fixed order.
    pub fn library_inputs(&self) -> [f64; 9] {
        [
            self.o, self.q, self.v, self.o_x, self.q_x, self.v_x, self.o_xx, self.q_xx, self.v_xx,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.library_inputs().iter().all(|v| v.is_finite()) && self.o_t.is_finite()
    }
}

/// Structure-of-arrays batch of [`StateAtPoint`]; also used for cotangents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateBatch {
    pub o: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub o_x: Vec<f64>,
    pub q_x: Vec<f64>,
    pub v_x: Vec<f64>,
    pub o_xx: Vec<f64>,
    pub q_xx: Vec<f64>,
    pub v_xx: Vec<f64>,
    pub o_t: Vec<f64>,
}

impl StateBatch {
    pub fn zeros(n: usize) -> Self {
        let z = || vec![0.0; n];
        Self {
            o: z(),
            q: z(),
            v: z(),
            o_x: z(),
            q_x: z(),
            v_x: z(),
            o_xx: z(),
            q_xx: z(),
            v_xx: z(),
            o_t: z(),
        }
    }

    pub fn len(&self) -> usize {
        self.o.len()
    }

    pub fn is_empty(&self) -> bool {
        self.o.is_empty()
    }

    pub fn get(&self, i: usize) -> StateAtPoint {
        StateAtPoint {
            o: self.o[i],
            q: self.q[i],
            v: self.v[i],
            o_x: self.o_x[i],
            q_x: self.q_x[i],
            v_x: self.v_x[i],
            o_xx: self.o_xx[i],
            q_xx: self.q_xx[i],
            v_xx: self.v_xx[i],
            o_t: self.o_t[i],
        }
    }

    pub fn set(&mut self, i: usize, s: &StateAtPoint) {
        self.o[i] = s.o;
        self.q[i] = s.q;
        self.v[i] = s.v;
        self.o_x[i] = s.o_x;
        self.q_x[i] = s.q_x;
        self.v_x[i] = s.v_x;
        self.o_xx[i] = s.o_xx;
        self.q_xx[i] = s.q_xx;
        self.v_xx[i] = s.v_xx;
        self.o_t[i] = s.o_t;
    }

    fn fields_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.o,
            &mut self.q,
            &mut self.v,
            &mut self.o_x,
            &mut self.q_x,
            &mut self.v_x,
            &mut self.o_xx,
            &mut self.q_xx,
            &mut self.v_xx,
            &mut self.o_t,
        ]
    }

    fn extend(&mut self, mut other: StateBatch) {
        for (a, b) in self.fields_mut().into_iter().zip(other.fields_mut()) {
            a.append(b);
        }
    }
}

/// Second-order assembly used for `q_xx` and `v_xx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecondOrderFormula {
    /// Full chain and product rule, including the mixed partial.
    #[default]
    Full,
    /// Printed three-term form without the mixed partial.
    Literal,
}

impl SecondOrderFormula {
    fn cross(self) -> f64 {
        match self {
            SecondOrderFormula::Full => 2.0,
            SecondOrderFormula::Literal => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    pub formula: SecondOrderFormula,
    /// Points per jet batch; results do not depend on the thread count.
    pub chunk_size: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            formula: SecondOrderFormula::Full,
            chunk_size: 64,
        }
    }
}

/// Value, x, t, xx.
fn occupancy_layout() -> JetLayout {
    JetLayout::new(2, vec![(0, 0)])
}

/// Value; directions along the occupancy input and the position input
/// (and optionally the time input); pairs oo, o-phi, phi-phi.
fn partial_layout(with_time: bool) -> JetLayout {
    JetLayout::new(if with_time { 3 } else { 2 }, vec![(0, 0), (0, 1), (1, 1)])
}

fn occupancy_input(coords: &[(f64, f64)]) -> Vec<f64> {
    let b = coords.len();
    let cols = 4 * b;
    let mut v = vec![0.0; 2 * cols];
    for (k, &(x, t)) in coords.iter().enumerate() {
        v[k] = x;
        v[b + k] = 1.0;
        v[cols + k] = t;
        v[cols + 2 * b + k] = 1.0;
    }
    v
}

fn partial_input(o: &[f64], coords: &[(f64, f64)], with_time: bool) -> Vec<f64> {
    let b = coords.len();
    let cols = partial_layout(with_time).channels() * b;
    let mut v = vec![0.0; 3 * cols];
    for (k, &(x, t)) in coords.iter().enumerate() {
        v[k] = o[k];
        v[b + k] = 1.0;
        v[cols + k] = x;
        v[cols + 2 * b + k] = 1.0;
        v[2 * cols + k] = t;
        if with_time {
            v[2 * cols + 3 * b + k] = 1.0;
        }
    }
    v
}

fn check_width(net: &RationalMlp, width: usize, name: &str) -> Result<()> {
    if net.input_width() != width {
        return Err(Error::InvalidNetwork(format!(
            "{name} network must take {width} inputs, takes {}",
            net.input_width()
        )));
    }
    Ok(())
}

/// Exact value, `d/dx`, `d/dt` and `d2/dx2` of the occupancy network.
pub fn occupancy_jet(f_o: &RationalMlp, x: f64, t: f64) -> Result<Jet2> {
    check_width(f_o, 2, "occupancy")?;
    let tape = taylor::forward(f_o, &occupancy_layout(), occupancy_input(&[(x, t)]), 1)?;
    let out = tape.output();
    Ok(Jet2 {
        value: out[0],
        d_dx: out[1],
        d_dt: out[2],
        d2_dx2: out[3],
    })
}

/// Chain-rule jet of a network taking `(o, x, t)`, fed the occupancy jet.
pub fn dependent_jet(f: &RationalMlp, occ: &Jet2, x: f64, t: f64, formula: SecondOrderFormula) -> Result<Jet2> {
    check_width(f, 3, "dependent")?;
    let tape = taylor::forward(
        f,
        &partial_layout(true),
        partial_input(&[occ.value], &[(x, t)], true),
        1,
    )?;
    let p = tape.output();
    // channels: value, o, phi, lambda, oo, o-phi, phi-phi
    let (q, q_o, q_phi, q_lam, q_oo, q_ophi, q_phiphi) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
    Ok(Jet2 {
        value: q,
        d_dx: q_o * occ.d_dx + q_phi,
        d_dt: q_o * occ.d_dt + q_lam,
        d2_dx2: q_oo * occ.d_dx * occ.d_dx + formula.cross() * q_ophi * occ.d_dx + q_phiphi + q_o * occ.d2_dx2,
    })
}

/// Flow jet via the chain-rule assembly.
pub fn flow_jet(f_q: &RationalMlp, occ: &Jet2, x: f64, t: f64) -> Result<Jet2> {
    dependent_jet(f_q, occ, x, t, SecondOrderFormula::Full)
}

/// Speed jet via the chain-rule assembly.
pub fn speed_jet(f_v: &RationalMlp, occ: &Jet2, x: f64, t: f64) -> Result<Jet2> {
    dependent_jet(f_v, occ, x, t, SecondOrderFormula::Full)
}

/// Oracle route: differentiate `(x, t) -> f(f_o(x, t), x, t)` as one map by
/// pushing the occupancy network's output jet straight into `f`.
pub fn composite_jet(f_o: &RationalMlp, f: &RationalMlp, x: f64, t: f64) -> Result<Jet2> {
    check_width(f_o, 2, "occupancy")?;
    check_width(f, 3, "dependent")?;
    let layout = occupancy_layout();
    let occ = taylor::forward(f_o, &layout, occupancy_input(&[(x, t)]), 1)?;
    let mut input = occ.output().to_vec();
    input.extend_from_slice(&[x, 1.0, 0.0, 0.0, t, 0.0, 1.0, 0.0]);
    let tape = taylor::forward(f, &layout, input, 1)?;
    let out = tape.output();
    Ok(Jet2 {
        value: out[0],
        d_dx: out[1],
        d_dt: out[2],
        d2_dx2: out[3],
    })
}

/// `x`-second derivatives of flow and speed under both assemblies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiteralDiscrepancy {
    pub q_xx_full: f64,
    pub q_xx_literal: f64,
    pub v_xx_full: f64,
    pub v_xx_literal: f64,
}

impl LiteralDiscrepancy {
    pub fn q_gap(&self) -> f64 {
        self.q_xx_full - self.q_xx_literal
    }

    pub fn v_gap(&self) -> f64 {
        self.v_xx_full - self.v_xx_literal
    }
}

pub fn literal_discrepancy(nets: &FieldTriplet, x: f64, t: f64) -> Result<LiteralDiscrepancy> {
    let occ = occupancy_jet(&nets.occupancy, x, t)?;
    let qf = dependent_jet(&nets.flow, &occ, x, t, SecondOrderFormula::Full)?;
    let ql = dependent_jet(&nets.flow, &occ, x, t, SecondOrderFormula::Literal)?;
    let vf = dependent_jet(&nets.speed, &occ, x, t, SecondOrderFormula::Full)?;
    let vl = dependent_jet(&nets.speed, &occ, x, t, SecondOrderFormula::Literal)?;
    Ok(LiteralDiscrepancy {
        q_xx_full: qf.d2_dx2,
        q_xx_literal: ql.d2_dx2,
        v_xx_full: vf.d2_dx2,
        v_xx_literal: vl.d2_dx2,
    })
}

/// All ten state quantities at one point.
pub fn state_at(nets: &FieldTriplet, x: f64, t: f64) -> Result<StateAtPoint> {
    Ok(states(nets, &[(x, t)], &EngineOptions::default())?.get(0))
}

struct ChunkTapes {
    occ: JetTape,
    flow: JetTape,
    speed: JetTape,
}

fn forward_chunk(
    nets: &FieldTriplet,
    coords: &[(f64, f64)],
    formula: SecondOrderFormula,
) -> Result<(StateBatch, ChunkTapes)> {
    let b = coords.len();
    let occ = taylor::forward(&nets.occupancy, &occupancy_layout(), occupancy_input(coords), b)?;
    let o = occ.channel(0).to_vec();
    let layout = partial_layout(false);
    let flow = taylor::forward(&nets.flow, &layout, partial_input(&o, coords, false), b)?;
    let speed = taylor::forward(&nets.speed, &layout, partial_input(&o, coords, false), b)?;
    let (o_x, o_t, o_xx) = (occ.channel(1), occ.channel(2), occ.channel(3));
    let cross = formula.cross();
    let assemble = |tape: &JetTape| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let p = |c| tape.channel(c);
        let (val, d_o, d_phi, d_oo, d_ophi, d_phiphi) = (p(0), p(1), p(2), p(3), p(4), p(5));
        let dx = (0..b).map(|k| d_o[k] * o_x[k] + d_phi[k]).collect();
        let dxx = (0..b)
            .map(|k| d_oo[k] * o_x[k] * o_x[k] + cross * d_ophi[k] * o_x[k] + d_phiphi[k] + d_o[k] * o_xx[k])
            .collect();
        (val.to_vec(), dx, dxx)
    };
    let (q, q_x, q_xx) = assemble(&flow);
    let (v, v_x, v_xx) = assemble(&speed);
    let state = StateBatch {
        o,
        q,
        v,
        o_x: o_x.to_vec(),
        q_x,
        v_x,
        o_xx: o_xx.to_vec(),
        q_xx,
        v_xx,
        o_t: o_t.to_vec(),
    };
    Ok((state, ChunkTapes { occ, flow, speed }))
}

/// Parameter gradients of the three networks, laid out like their
/// parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads {
    pub occupancy: Vec<f64>,
    pub flow: Vec<f64>,
    pub speed: Vec<f64>,
}

impl TripletGrads {
    pub fn zeros(nets: &FieldTriplet) -> Self {
        Self {
            occupancy: vec![0.0; nets.occupancy.param_count()],
            flow: vec![0.0; nets.flow.param_count()],
            speed: vec![0.0; nets.speed.param_count()],
        }
    }

    pub fn parts(&self) -> [&Vec<f64>; 3] {
        [&self.occupancy, &self.flow, &self.speed]
    }

    pub fn parts_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.occupancy, &mut self.flow, &mut self.speed]
    }

    fn add(&mut self, other: &TripletGrads) {
        for (a, b) in self.parts_mut().into_iter().zip(other.parts()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Fails with the first non-finite component, naming its network and block.
    pub fn check_finite(&self, nets: &FieldTriplet) -> Result<()> {
        for ((name, net), g) in ["occupancy", "flow", "speed"].iter().zip(nets.nets()).zip(self.parts()) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{name} network {}", net.block_of(i))));
            }
        }
        Ok(())
    }
}

fn backward_chunk(
    nets: &FieldTriplet,
    state: &StateBatch,
    tapes: &ChunkTapes,
    ct: &StateBatch,
    formula: SecondOrderFormula,
) -> Result<TripletGrads> {
    let b = state.len();
    let cross = formula.cross();
    let mut grads = TripletGrads::zeros(nets);
    let mut g_o = ct.o.clone();
    let mut g_ox = ct.o_x.clone();
    let mut g_oxx = ct.o_xx.clone();
    let dependents = [
        (&nets.flow, &tapes.flow, &ct.q, &ct.q_x, &ct.q_xx),
        (&nets.speed, &tapes.speed, &ct.v, &ct.v_x, &ct.v_xx),
    ];
    for (slot, (net, tape, c_val, c_x, c_xx)) in dependents.into_iter().enumerate() {
        let p = |c| tape.channel(c);
        let (d_o, d_oo, d_ophi) = (p(1), p(3), p(4));
        let mut g = vec![0.0; 6 * b];
        for k in 0..b {
            let ox = state.o_x[k];
            g[k] = c_val[k];
            g[b + k] = c_x[k] * ox + c_xx[k] * state.o_xx[k];
            g[2 * b + k] = c_x[k];
            g[3 * b + k] = c_xx[k] * ox * ox;
            g[4 * b + k] = cross * c_xx[k] * ox;
            g[5 * b + k] = c_xx[k];
            g_ox[k] += c_x[k] * d_o[k] + c_xx[k] * (2.0 * d_oo[k] * ox + cross * d_ophi[k]);
            g_oxx[k] += c_xx[k] * d_o[k];
        }
        let target = if slot == 0 { &mut grads.flow } else { &mut grads.speed };
        let gin = taylor::backward(net, tape, &g, target, true)?.expect("input cotangent requested");
        for k in 0..b {
            g_o[k] += gin[k];
        }
    }
    let mut g = Vec::with_capacity(4 * b);
    g.extend_from_slice(&g_o);
    g.extend_from_slice(&g_ox);
    g.extend_from_slice(&ct.o_t);
    g.extend_from_slice(&g_oxx);
    taylor::backward(&nets.occupancy, &tapes.occ, &g, &mut grads.occupancy, false)?;
    Ok(grads)
}

/// States at many points, computed in fixed-size chunks.
pub fn states(nets: &FieldTriplet, coords: &[(f64, f64)], opts: &EngineOptions) -> Result<StateBatch> {
    let chunk = opts.chunk_size.max(1);
    let parts = coords
        .par_chunks(chunk)
        .map(|c| forward_chunk(nets, c, opts.formula).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    let mut out = StateBatch::default();
    for p in parts {
        out.extend(p);
    }
    Ok(out)
}

/// Per-chunk loss callback: receives the chunk offset and its states, returns
/// partial sums (any fixed length) and the cotangent of the chunk's states.
pub type ChunkLoss<'a> = dyn Fn(usize, &StateBatch) -> Result<(Vec<f64>, StateBatch)> + Sync + 'a;

/// Parameter gradient of a loss that is a sum of per-point terms over
/// `coords`. Partial sums and gradients are reduced in chunk order, so the
/// result is independent of the number of worker threads.
pub fn accumulate_gradient(
    nets: &FieldTriplet,
    coords: &[(f64, f64)],
    opts: &EngineOptions,
    loss: &ChunkLoss<'_>,
) -> Result<(Vec<f64>, TripletGrads)> {
    let chunk = opts.chunk_size.max(1);
    let parts = coords
        .par_chunks(chunk)
        .enumerate()
        .map(|(i, c)| {
            let (state, tapes) = forward_chunk(nets, c, opts.formula)?;
            let (partials, ct) = loss(i * chunk, &state)?;
            if ct.len() != state.len() {
                return Err(Error::LengthMismatch {
                    expected: state.len(),
                    got: ct.len(),
                });
            }
            let grads = backward_chunk(nets, &state, &tapes, &ct, opts.formula)?;
            Ok((partials, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = TripletGrads::zeros(nets);
    let mut sums: Vec<f64> = Vec::new();
    for (partials, grads) in parts {
        if sums.is_empty() {
            sums = vec![0.0; partials.len()];
        }
        for (s, p) in sums.iter_mut().zip(&partials) {
            *s += p;
        }
        total.add(&grads);
    }
    total.check_finite(nets)?;
    Ok((sums, total))
}

/// Gradient of `sum_i <cotangent_i, state_i>` at the given points.
pub fn parameter_gradient(
    nets: &FieldTriplet,
    coords: &[(f64, f64)],
    cotangents: &[StateAtPoint],
    opts: &EngineOptions,
) -> Result<TripletGrads> {
    if cotangents.len() != coords.len() {
        return Err(Error::LengthMismatch {
            expected: coords.len(),
            got: cotangents.len(),
        });
    }
    let f = |offset: usize, s: &StateBatch| {
        let mut ct = StateBatch::zeros(s.len());
        for i in 0..s.len() {
            ct.set(i, &cotangents[offset + i]);
        }
        Ok((Vec::new(), ct))
    };
    Ok(accumulate_gradient(nets, coords, opts, &f)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{init_networks, NetworkWidths, RationalActivation};

    fn small_widths() -> NetworkWidths {
        NetworkWidths {
            occupancy: vec![2, 7, 5, 1],
            flow: vec![3, 6, 4, 1],
            speed: vec![3, 5, 1],
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    /// f(x, t) = x^2 + t with square activations:
    /// x^2 + ((t + 1)^2 - (t - 1)^2) / 4.
    fn quadratic_harness() -> RationalMlp {
        let mut net = RationalMlp::zeros(&[2, 3, 1], 2, 0).unwrap();
        net.weights_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        net.bias_mut(0).copy_from_slice(&[0.0, 1.0, -1.0]);
        net.set_activation(0, &RationalActivation::new(vec![0.0, 0.0, 1.0], vec![1.0]).unwrap())
            .unwrap();
        net.weights_mut(1).copy_from_slice(&[1.0, 0.25, -0.25]);
        net
    }

    #[test]
    fn quadratic_harness_jet() {
        let net = quadratic_harness();
        for (x, t) in [(0.3, -0.2), (-0.9, 0.7)] {
            let j = occupancy_jet(&net, x, t).unwrap();
            assert!((j.value - (x * x + t)).abs() < 1e-14);
            assert!((j.d_dx - 2.0 * x).abs() < 1e-14);
            assert!((j.d_dt - 1.0).abs() < 1e-14);
            assert!((j.d2_dx2 - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_network_has_zero_derivatives() {
        let mut net = RationalMlp::zeros(&[2, 4, 1], 3, 2).unwrap();
        net.bias_mut(1)[0] = 0.7;
        let j = occupancy_jet(&net, 0.2, 0.4).unwrap();
        assert_eq!(
            j,
            Jet2 {
                value: 0.7,
                ..Jet2::default()
            }
        );
    }

    #[test]
    fn pass_through_and_direct_dependence() {
        let f_o = quadratic_harness();
        let mut pass = RationalMlp::zeros(&[3, 1], 1, 0).unwrap();
        pass.weights_mut(0)[0] = 1.0;
        let mut only_x = RationalMlp::zeros(&[3, 1], 1, 0).unwrap();
        only_x.weights_mut(0)[1] = 1.0;
        let (x, t) = (0.4, 0.1);
        let occ = occupancy_jet(&f_o, x, t).unwrap();
        assert_eq!(flow_jet(&pass, &occ, x, t).unwrap(), occ);
        assert_eq!(speed_jet(&pass, &occ, x, t).unwrap(), occ);
        let j = flow_jet(&only_x, &occ, x, t).unwrap();
        assert_eq!((j.d_dx, j.d2_dx2, j.d_dt), (1.0, 0.0, 0.0));
    }

    #[test]
    fn chain_rule_matches_composite_route_for_many_seeds() {
        let w = small_widths();
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let nets = init_networks(&w, seed).unwrap();
            let (x, t) = (-0.8 + 0.016 * seed as f64, 0.6 - 0.011 * seed as f64);
            let occ = occupancy_jet(&nets.occupancy, x, t).unwrap();
            for f in [&nets.flow, &nets.speed] {
                let a = flow_jet(f, &occ, x, t).unwrap();
                let b = composite_jet(&nets.occupancy, f, x, t).unwrap();
                for (u, v) in [
                    (a.value, b.value),
                    (a.d_dx, b.d_dx),
                    (a.d_dt, b.d_dt),
                    (a.d2_dx2, b.d2_dx2),
                ] {
                    let scale = b.value.abs().max(b.d_dx.abs()).max(b.d2_dx2.abs()).max(1e-300);
                    worst = worst.max((u - v).abs() / scale);
                }
            }
        }
        assert!(worst < 1e-8, "worst relative gap {worst}");
    }

    #[test]
    fn literal_formula_differs_by_the_mixed_term() {
        let nets = init_networks(&small_widths(), 5).unwrap();
        let (x, t) = (0.25, -0.35);
        let d = literal_discrepancy(&nets, x, t).unwrap();
        assert!(d.q_gap().abs() > 1e-6);
        // the gap is exactly 2 q_ophi o_x
        let occ = occupancy_jet(&nets.occupancy, x, t).unwrap();
        let h = 1e-4;
        let q_phi = |o: f64| dependent_phi(&nets.flow, o, x, t);
        let q_ophi = (q_phi(occ.value + h) - q_phi(occ.value - h)) / (2.0 * h);
        assert!(rel(d.q_gap(), 2.0 * q_ophi * occ.d_dx) < 1e-4);
    }

    /// d f / d phi at fixed o via the scalar forward pass.
    fn dependent_phi(f: &RationalMlp, o: f64, x: f64, t: f64) -> f64 {
        let h = 1e-5;
        (f.forward(&[o, x + h, t]).unwrap() - f.forward(&[o, x - h, t]).unwrap()) / (2.0 * h)
    }

    #[test]
    fn batch_matches_pointwise() {
        let nets = init_networks(&small_widths(), 9).unwrap();
        let coords: Vec<(f64, f64)> = (0..37)
            .map(|k| (-1.0 + 0.05 * k as f64, 0.9 - 0.04 * k as f64))
            .collect();
        let opts = EngineOptions {
            chunk_size: 8,
            ..EngineOptions::default()
        };
        let batch = states(&nets, &coords, &opts).unwrap();
        assert_eq!(batch.len(), 37);
        for (i, &(x, t)) in coords.iter().enumerate() {
            let p = state_at(&nets, x, t).unwrap();
            let b = batch.get(i);
            for (u, v) in p.library_inputs().iter().zip(b.library_inputs()) {
                assert!((u - v).abs() <= 1e-13 * v.abs().max(1.0));
            }
            let occ = occupancy_jet(&nets.occupancy, x, t).unwrap();
            let q = flow_jet(&nets.flow, &occ, x, t).unwrap();
            assert!((q.d2_dx2 - b.q_xx).abs() <= 1e-12 * q.d2_dx2.abs().max(1.0));
            assert!((occ.d_dt - b.o_t).abs() <= 1e-13 * occ.d_dt.abs().max(1.0));
        }
    }

    #[test]
    fn squared_slope_gradient_matches_parameter_perturbation() {
        let nets = init_networks(&small_widths(), 13).unwrap();
        let (x, t) = (0.15, -0.45);
        let s = state_at(&nets, x, t).unwrap();
        let ct = StateAtPoint {
            o_x: 2.0 * s.o_x,
            ..StateAtPoint::default()
        };
        let g = parameter_gradient(&nets, &[(x, t)], &[ct], &EngineOptions::default()).unwrap();
        let loss = |n: &FieldTriplet| state_at(n, x, t).unwrap().o_x.powi(2);
        for idx in (0..nets.occupancy.param_count()).step_by(3) {
            let h = 1e-6;
            let mut p = nets.clone();
            p.occupancy.params_mut()[idx] += h;
            let mut m = nets.clone();
            m.occupancy.params_mut()[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((g.occupancy[idx] - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "{idx}");
        }
        assert!(g.flow.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_through_all_state_quantities() {
        let nets = init_networks(&small_widths(), 21).unwrap();
        let coords = [(0.3, 0.2), (-0.6, 0.5), (0.8, -0.7)];
        let wts = StateAtPoint {
            o: 0.3,
            q: -0.7,
            v: 0.2,
            o_x: 1.1,
            q_x: -0.4,
            v_x: 0.9,
            o_xx: 0.25,
            q_xx: -0.6,
            v_xx: 0.45,
            o_t: -1.2,
        };
        let loss = |n: &FieldTriplet| {
            coords
                .iter()
                .map(|&(x, t)| {
                    let s = state_at(n, x, t).unwrap();
                    let (a, b) = (s.library_inputs(), wts.library_inputs());
                    a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() + s.o_t * wts.o_t
                })
                .sum::<f64>()
        };
        let g = parameter_gradient(&nets, &coords, &[wts; 3], &EngineOptions::default()).unwrap();
        for (slot, grads) in g.parts().into_iter().enumerate() {
            let count = grads.len();
            for idx in (0..count).step_by(7) {
                let h = 1e-6;
                let bump = |d: f64| {
                    let mut n = nets.clone();
                    n.nets_mut()[slot].params_mut()[idx] += d;
                    loss(&n)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!(
                    (grads[idx] - fd).abs() <= 1e-5 * fd.abs().max(1e-2),
                    "net {slot} param {idx}: {} vs {fd}",
                    grads[idx]
                );
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let nets = init_networks(&small_widths(), 1).unwrap();
        let mut g = TripletGrads::zeros(&nets);
        let idx = nets.flow.offsets(1).bias;
        g.flow[idx] = f64::NAN;
        let err = g.check_finite(&nets).unwrap_err();
        assert_eq!(
            err.to_string(),
            "non-finite gradient in parameter block flow network layer 1 bias"
        );
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let nets = init_networks(&small_widths(), 2).unwrap();
        let coords: Vec<(f64, f64)> = (0..50)
            .map(|k| (-0.9 + 0.035 * k as f64, 0.1 * (k % 7) as f64 - 0.3))
            .collect();
        let cts = vec![
            StateAtPoint {
                o: 1.0,
                q_xx: 0.5,
                o_t: -0.3,
                ..StateAtPoint::default()
            };
            50
        ];
        let opts = EngineOptions {
            chunk_size: 6,
            ..EngineOptions::default()
        };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| parameter_gradient(&nets, &coords, &cts, &opts).unwrap())
        };
        let a = run(1);
        let b = run(3);
        for (u, v) in a.parts().into_iter().zip(b.parts()) {
            assert!(u.iter().zip(v).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
