//! Feed-forward networks with trainable rational activations.
//!
//! Each hidden layer applies `z = sigma(W i + b)` with one rational function
//! `sigma(m) = N(m) / D(m)` shared by the whole layer; the output layer is
//! affine. Parameters live in one flat vector per network so the optimizer
//! and the gradient engine can treat them uniformly.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::NormalizationParams;

/// Denominators smaller than this in magnitude are treated as a pole.
pub const DENOMINATOR_FLOOR: f64 = 1e-30;

/// Best type-(3,2) rational approximant of ReLU on [-1, 1] (Boullé et al.),
/// numerator then denominator, ascending powers.
const RELU_APPROX_UNIT: ([f64; 4], [f64; 3]) = ([0.0218, 0.5, 1.5957, 1.1915], [1.0, 0.0, 2.383]);

/// Half-width of the interval the initial activation is fitted on.
pub const RELU_FIT_HALF_WIDTH: f64 = 6.0;

/// Coefficients of the unit approximant rescaled to `[-s, s]` using
/// `relu(x) = s * relu(x / s)`.
pub fn relu_approximant(half_width: f64) -> (Vec<f64>, Vec<f64>) {
    let (a, b) = RELU_APPROX_UNIT;
    let num = a
        .iter()
        .enumerate()
        .map(|(k, c)| half_width * c / half_width.powi(k as i32))
        .collect();
    let den = b
        .iter()
        .enumerate()
        .map(|(k, c)| c / half_width.powi(k as i32))
        .collect();
    (num, den)
}

/// Truncated Taylor coefficients `[p(m), p'(m), p''(m)/2, p'''(m)/6]` by Horner.
#[inline]
pub(crate) fn poly_series(coeffs: &[f64], m: f64) -> [f64; 4] {
    let mut r = [0.0; 4];
    for &c in coeffs.iter().rev() {
        r[3] = r[3] * m + r[2];
        r[2] = r[2] * m + r[1];
        r[1] = r[1] * m + r[0];
        r[0] = r[0] * m + c;
    }
    r
}

/// `[sigma, sigma', sigma'', sigma''']` at `m`, from the quotient rule on
/// Horner-evaluated numerator and denominator series.
pub fn rational_derivatives(num: &[f64], den: &[f64], m: f64) -> Result<[f64; 4]> {
    let n = poly_series(num, m);
    let d = poly_series(den, m);
    if !(d[0].abs() >= DENOMINATOR_FLOOR) {
        return Err(Error::DegenerateActivation {
            m,
            denominator: d[0].abs(),
            layer: None,
        });
    }
    let q0 = n[0] / d[0];
    let q1 = (n[1] - q0 * d[1]) / d[0];
    let q2 = (n[2] - q0 * d[2] - q1 * d[1]) / d[0];
    let q3 = (n[3] - q0 * d[3] - q1 * d[2] - q2 * d[1]) / d[0];
    Ok([q0, q1, 2.0 * q2, 6.0 * q3])
}

/// A rational activation `sum a_i m^i / sum b_j m^j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalActivation {
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
}

impl RationalActivation {
    pub fn new(numerator: Vec<f64>, denominator: Vec<f64>) -> Result<Self> {
        if numerator.len() < 2 || denominator.is_empty() {
            return Err(Error::InvalidNetwork(format!(
                "rational type ({}, {}) needs r_N >= 1 and r_D >= 0",
                numerator.len() as isize - 1,
                denominator.len() as isize - 1
            )));
        }
        Ok(Self { numerator, denominator })
    }

    pub fn identity() -> Self {
        Self {
            numerator: vec![0.0, 1.0],
            denominator: vec![1.0],
        }
    }

    /// ReLU-fitted type-(3,2) activation used at initialization.
    pub fn relu_like() -> Self {
        let (numerator, denominator) = relu_approximant(RELU_FIT_HALF_WIDTH);
        Self { numerator, denominator }
    }

    pub fn order(&self) -> (usize, usize) {
        (self.numerator.len() - 1, self.denominator.len() - 1)
    }

    pub fn eval(&self, m: f64) -> Result<f64> {
        let n = poly_series(&self.numerator, m)[0];
        let d = poly_series(&self.denominator, m)[0];
        if !(d.abs() >= DENOMINATOR_FLOOR) {
            return Err(Error::DegenerateActivation {
                m,
                denominator: d.abs(),
                layer: None,
            });
        }
        Ok(n / d)
    }

    pub fn derivatives(&self, m: f64) -> Result<[f64; 4]> {
        rational_derivatives(&self.numerator, &self.denominator, m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub weights: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Multilayer perceptron with per-layer rational activations.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalMlp {
    widths: Vec<usize>,
    numerator_order: usize,
    denominator_order: usize,
    params: Vec<f64>,
    layers: Vec<LayerOffsets>,
    /// (numerator, denominator) offsets per hidden layer.
    activations: Vec<(usize, usize)>,
}

/// Which part of a network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    Weights(usize),
    Bias(usize),
    Numerator(usize),
    Denominator(usize),
}

impl std::fmt::Display for ParamBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamBlock::Weights(l) => write!(f, "layer {l} weights"),
            ParamBlock::Bias(l) => write!(f, "layer {l} bias"),
            ParamBlock::Numerator(l) => write!(f, "layer {l} activation numerator"),
            ParamBlock::Denominator(l) => write!(f, "layer {l} activation denominator"),
        }
    }
}

impl RationalMlp {
    /// Zero weights and biases, identity-like activations of the given type
    /// (`a_1 = 1`, `b_0 = 1`).
    pub fn zeros(widths: &[usize], numerator_order: usize, denominator_order: usize) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidNetwork(format!("bad widths {widths:?}")));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::InvalidNetwork("output width must be 1".into()));
        }
        if numerator_order < 1 {
            return Err(Error::InvalidNetwork("numerator order must be >= 1".into()));
        }
        let mut offset = 0;
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            layers.push(LayerOffsets {
                weights: offset,
                bias: offset + w[0] * w[1],
                fan_in: w[0],
                fan_out: w[1],
            });
            offset += w[0] * w[1] + w[1];
        }
        let mut activations = Vec::new();
        for _ in 0..layers.len() - 1 {
            activations.push((offset, offset + numerator_order + 1));
            offset += numerator_order + 1 + denominator_order + 1;
        }
        let mut net = Self {
            widths: widths.to_vec(),
            numerator_order,
            denominator_order,
            params: vec![0.0; offset],
            layers,
            activations,
        };
        for l in 0..net.hidden_layers() {
            let (n, d) = net.activations[l];
            net.params[n + 1] = 1.0;
            net.params[d] = 1.0;
        }
        Ok(net)
    }

    /// Random network: weights drawn from N(0, gain / fan_in) with gain 2 for
    /// hidden layers and 1 for the output layer, zero biases, ReLU-fitted
    /// type-(3,2) activations.
    pub fn random(widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeros(widths, 3, 2)?;
        let hidden = net.hidden_layers();
        for (l, lo) in net.layers.clone().into_iter().enumerate() {
            let gain = if l < hidden { 2.0 } else { 1.0 };
            let std = (gain / lo.fan_in as f64).sqrt();
            for w in &mut net.params[lo.weights..lo.bias] {
                let z: f64 = StandardNormal.sample(rng);
                *w = std * z;
            }
        }
        let act = RationalActivation::relu_like();
        for l in 0..hidden {
            net.set_activation(l, &act)?;
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn rational_order(&self) -> (usize, usize) {
        (self.numerator_order, self.denominator_order)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// `sum(w_i * w_{i+1} + w_{i+1})` over consecutive widths.
    pub fn linear_param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn offsets(&self, layer: usize) -> LayerOffsets {
        self.layers[layer]
    }

    /// Row-major `fan_out x fan_in` weight matrix of `layer`.
    pub fn weights(&self, layer: usize) -> &[f64] {
        let lo = self.layers[layer];
        &self.params[lo.weights..lo.bias]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let lo = self.layers[layer];
        &mut self.params[lo.weights..lo.bias]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let lo = self.layers[layer];
        &self.params[lo.bias..lo.bias + lo.fan_out]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let lo = self.layers[layer];
        &mut self.params[lo.bias..lo.bias + lo.fan_out]
    }

    pub(crate) fn activation_slices(&self, hidden: usize) -> (&[f64], &[f64]) {
        let (n, d) = self.activations[hidden];
        (
            &self.params[n..n + self.numerator_order + 1],
            &self.params[d..d + self.denominator_order + 1],
        )
    }

    pub(crate) fn activation_offsets(&self, hidden: usize) -> (usize, usize) {
        self.activations[hidden]
    }

    pub fn activation(&self, hidden: usize) -> RationalActivation {
        let (n, d) = self.activation_slices(hidden);
        RationalActivation {
            numerator: n.to_vec(),
            denominator: d.to_vec(),
        }
    }

    pub fn set_activation(&mut self, hidden: usize, act: &RationalActivation) -> Result<()> {
        if act.order() != (self.numerator_order, self.denominator_order) {
            return Err(Error::InvalidNetwork(format!(
                "activation type {:?} does not match network type ({}, {})",
                act.order(),
                self.numerator_order,
                self.denominator_order
            )));
        }
        let (n, d) = self.activations[hidden];
        self.params[n..n + act.numerator.len()].copy_from_slice(&act.numerator);
        self.params[d..d + act.denominator.len()].copy_from_slice(&act.denominator);
        Ok(())
    }

    /// Block that owns flat parameter `index`.
    pub fn block_of(&self, index: usize) -> ParamBlock {
        for (l, lo) in self.layers.iter().enumerate() {
            if (lo.weights..lo.bias).contains(&index) {
                return ParamBlock::Weights(l);
            }
            if (lo.bias..lo.bias + lo.fan_out).contains(&index) {
                return ParamBlock::Bias(l);
            }
        }
        for (l, &(n, d)) in self.activations.iter().enumerate() {
            if (n..d).contains(&index) {
                return ParamBlock::Numerator(l);
            }
            if (d..d + self.denominator_order + 1).contains(&index) {
                return ParamBlock::Denominator(l);
            }
        }
        unreachable!("parameter index {index} out of range")
    }

    /// Scalar forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        if input.len() != self.input_width() {
            return Err(Error::InputWidth {
                expected: self.input_width(),
                got: input.len(),
            });
        }
        let mut a = input.to_vec();
        for (l, lo) in self.layers.iter().enumerate() {
            let w = self.weights(l);
            let b = self.bias(l);
            let mut z: Vec<f64> = (0..lo.fan_out)
                .map(|r| {
                    b[r] + w[r * lo.fan_in..(r + 1) * lo.fan_in]
                        .iter()
                        .zip(&a)
                        .map(|(w, a)| w * a)
                        .sum::<f64>()
                })
                .collect();
            if l < self.hidden_layers() {
                let (num, den) = self.activation_slices(l);
                for m in &mut z {
                    *m = rational_eval(num, den, *m).map_err(|e| with_layer(e, l))?;
                }
            }
            a = z;
        }
        Ok(a[0])
    }
}

#[inline]
pub(crate) fn rational_eval(num: &[f64], den: &[f64], m: f64) -> Result<f64> {
    let n = num.iter().rev().fold(0.0, |acc, c| acc * m + c);
    let d = den.iter().rev().fold(0.0, |acc, c| acc * m + c);
    if !(d.abs() >= DENOMINATOR_FLOOR) {
        return Err(Error::DegenerateActivation {
            m,
            denominator: d.abs(),
            layer: None,
        });
    }
    Ok(n / d)
}

pub(crate) fn with_layer(err: Error, layer: usize) -> Error {
    match err {
        Error::DegenerateActivation { m, denominator, .. } => Error::DegenerateActivation {
            m,
            denominator,
            layer: Some(layer),
        },
        other => other,
    }
}

/// The three field networks: occupancy `f_o(x, t)`, flow `f_q(o, x, t)`,
/// speed `f_v(o, x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTriplet {
    pub occupancy: RationalMlp,
    pub flow: RationalMlp,
    pub speed: RationalMlp,
}

/// Widths of the three networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkWidths {
    pub occupancy: Vec<usize>,
    pub flow: Vec<usize>,
    pub speed: Vec<usize>,
}

impl Default for NetworkWidths {
    fn default() -> Self {
        Self {
            occupancy: vec![2, 50, 100, 100, 50, 1],
            flow: vec![3, 50, 100, 100, 50, 1],
            speed: vec![3, 50, 100, 100, 50, 1],
        }
    }
}

impl FieldTriplet {
    pub fn new(occupancy: RationalMlp, flow: RationalMlp, speed: RationalMlp) -> Result<Self> {
        for (name, net, width) in [("occupancy", &occupancy, 2), ("flow", &flow, 3), ("speed", &speed, 3)] {
            if net.input_width() != width {
                return Err(Error::InvalidNetwork(format!(
                    "{name} network must take {width} inputs, takes {}",
                    net.input_width()
                )));
            }
        }
        Ok(Self { occupancy, flow, speed })
    }

    pub fn nets(&self) -> [&RationalMlp; 3] {
        [&self.occupancy, &self.flow, &self.speed]
    }

    pub fn nets_mut(&mut self) -> [&mut RationalMlp; 3] {
        [&mut self.occupancy, &mut self.flow, &mut self.speed]
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }
}

/// Seeded initialization; each network draws from its own ChaCha stream.
pub fn init_networks(widths: &NetworkWidths, seed: u64) -> Result<FieldTriplet> {
    let mut nets = Vec::with_capacity(3);
    for (stream, w) in [&widths.occupancy, &widths.flow, &widths.speed].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64 + 1);
        nets.push(RationalMlp::random(w, &mut rng)?);
    }
    let speed = nets.pop().unwrap();
    let flow = nets.pop().unwrap();
    let occupancy = nets.pop().unwrap();
    FieldTriplet::new(occupancy, flow, speed)
}

/// Reconstructed `(o, q, v)` at one normalized point; flow and speed consume
/// the freshly reconstructed occupancy.
pub fn reconstruct_fields(nets: &FieldTriplet, x: f64, t: f64) -> Result<(f64, f64, f64)> {
    if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&x) || !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&t) {
        log::warn!("reconstruction at ({x}, {t}) extrapolates outside the normalized domain");
    }
    let o = nets.occupancy.forward(&[x, t])?;
    let q = nets.flow.forward(&[o, x, t])?;
    let v = nets.speed.forward(&[o, x, t])?;
    Ok((o, q, v))
}

pub const CHECKPOINT_FORMAT: &str = "traffic-pde-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkRecord {
    widths: Vec<usize>,
    numerator_order: usize,
    denominator_order: usize,
    layers: Vec<LayerRecord>,
    activations: Vec<RationalActivation>,
}

impl NetworkRecord {
    fn from_net(net: &RationalMlp) -> Self {
        let layers = (0..net.layer_count())
            .map(|l| {
                let lo = net.offsets(l);
                LayerRecord {
                    weights: net.weights(l).chunks(lo.fan_in).map(|r| r.to_vec()).collect(),
                    bias: net.bias(l).to_vec(),
                }
            })
            .collect();
        Self {
            widths: net.widths.clone(),
            numerator_order: net.numerator_order,
            denominator_order: net.denominator_order,
            layers,
            activations: (0..net.hidden_layers()).map(|l| net.activation(l)).collect(),
        }
    }

    fn into_net(self) -> Result<RationalMlp> {
        let mut net = RationalMlp::zeros(&self.widths, self.numerator_order, self.denominator_order)?;
        if self.layers.len() != net.layer_count() || self.activations.len() != net.hidden_layers() {
            return Err(Error::InvalidNetwork("checkpoint layer count mismatch".into()));
        }
        for (l, rec) in self.layers.into_iter().enumerate() {
            let lo = net.offsets(l);
            if rec.weights.len() != lo.fan_out
                || rec.weights.iter().any(|r| r.len() != lo.fan_in)
                || rec.bias.len() != lo.fan_out
            {
                return Err(Error::InvalidNetwork(format!("checkpoint layer {l} has wrong shape")));
            }
            let flat: Vec<f64> = rec.weights.into_iter().flatten().collect();
            net.weights_mut(l).copy_from_slice(&flat);
            net.bias_mut(l).copy_from_slice(&rec.bias);
        }
        for (l, act) in self.activations.into_iter().enumerate() {
            net.set_activation(l, &act)?;
        }
        Ok(net)
    }
}

/// On-disk network checkpoint (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    occupancy: NetworkRecord,
    flow: NetworkRecord,
    speed: NetworkRecord,
    pub normalization: NormalizationParams,
}

impl Checkpoint {
    pub fn new(nets: &FieldTriplet, normalization: NormalizationParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            occupancy: NetworkRecord::from_net(&nets.occupancy),
            flow: NetworkRecord::from_net(&nets.flow),
            speed: NetworkRecord::from_net(&nets.speed),
            normalization,
        }
    }

    pub fn networks(&self) -> Result<FieldTriplet> {
        FieldTriplet::new(
            self.occupancy.clone().into_net()?,
            self.flow.clone().into_net()?,
            self.speed.clone().into_net()?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidNetwork(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }
}
