//! Monomial dictionary over the reconstructed fields and their spatial
//! derivatives, the sparse coefficient vector, and equation formatting.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::derivatives::StateAtPoint;
use crate::error::{Error, Result};
use crate::grid::NormalizationParams;

/// Number of library variables.
pub const VARIABLES: usize = 9;

/// Display names of the variables, in library order.
pub const VARIABLE_NAMES: [&str; VARIABLES] = ["o", "q", "v", "∂x o", "∂x q", "∂x v", "∂x² o", "∂x² q", "∂x² v"];

/// Exponents of `(o, q, v, o_x, q_x, v_x, o_xx, q_xx, v_xx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExponentVector(pub [u32; VARIABLES]);

impl ExponentVector {
    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn unit(var: usize) -> Self {
        let mut c = [0; VARIABLES];
        c[var] = 1;
        Self(c)
    }

    /// `o^2`, `o ∂x o`, `(∂x o)^2`; the constant term is `1`.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        for (i, &e) in self.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            let base = VARIABLE_NAMES[i];
            let base = if e > 1 && base.contains(' ') {
                format!("({base})")
            } else {
                base.to_string()
            };
            parts.push(if e > 1 { format!("{base}^{e}") } else { base });
        }
        if parts.is_empty() {
            "1".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Ordered monomial dictionary: degree ascending, then exponent vectors in
/// descending lexicographic order, so the constant comes first and `o`
/// precedes `q`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermLibrary {
    terms: Vec<ExponentVector>,
    max_order: u32,
    derivative_order: u32,
}

/// Variables available for derivative order `m`: the fields, then their
/// first derivatives, then second derivatives.
fn variables_for(derivative_order: u32) -> usize {
    3 * (derivative_order as usize + 1)
}

fn compositions(total: u32, vars: usize, prefix: &mut Vec<u32>, out: &mut Vec<ExponentVector>) {
    if prefix.len() == vars - 1 {
        prefix.push(total);
        let mut c = [0; VARIABLES];
        c[..vars].copy_from_slice(prefix);
        out.push(ExponentVector(c));
        prefix.pop();
        return;
    }
    for e in (0..=total).rev() {
        prefix.push(e);
        compositions(total - e, vars, prefix, out);
        prefix.pop();
    }
}

/// All monomials of degree at most `max_order` in the variables allowed by
/// `derivative_order` (0, 1 or 2).
pub fn enumerate_terms(max_order: u32, derivative_order: u32) -> Result<TermLibrary> {
    if max_order < 1 {
        return Err(Error::InvalidLibrary(format!(
            "polynomial order must be >= 1, got {max_order}"
        )));
    }
    if derivative_order > 2 {
        return Err(Error::InvalidLibrary(format!(
            "derivative order must be 0, 1 or 2, got {derivative_order}"
        )));
    }
    let vars = variables_for(derivative_order);
    let mut terms = Vec::new();
    for d in 0..=max_order {
        compositions(d, vars, &mut Vec::new(), &mut terms);
    }
    Ok(TermLibrary {
        terms,
        max_order,
        derivative_order,
    })
}

impl TermLibrary {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[ExponentVector] {
        &self.terms
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    pub fn derivative_order(&self) -> u32 {
        self.derivative_order
    }

    pub fn index_of(&self, term: &ExponentVector) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    /// Evaluator with per-term factor lists, for repeated evaluation.
    pub fn evaluator(&self) -> ThetaEvaluator {
        ThetaEvaluator::new(self)
    }
}

/// Precomputed sparse factor lists of a library.
#[derive(Debug, Clone)]
pub struct ThetaEvaluator {
    factors: Vec<Vec<(usize, u32)>>,
    max_order: u32,
}

impl ThetaEvaluator {
    fn new(lib: &TermLibrary) -> Self {
        let factors = lib
            .terms
            .iter()
            .map(|t| {
                t.0.iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(i, &e)| (i, e))
                    .collect()
            })
            .collect();
        Self {
            factors,
            max_order: lib.max_order,
        }
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    fn powers(&self, s: &[f64; VARIABLES]) -> Vec<[f64; VARIABLES]> {
        let mut p = vec![[1.0; VARIABLES]; self.max_order as usize + 1];
        for e in 1..p.len() {
            for i in 0..VARIABLES {
                p[e][i] = p[e - 1][i] * s[i];
            }
        }
        p
    }

    /// Writes `Theta` for one state into `out`.
    pub fn eval_into(&self, s: &[f64; VARIABLES], out: &mut [f64]) {
        let p = self.powers(s);
        for (o, f) in out.iter_mut().zip(&self.factors) {
            *o = f.iter().fold(1.0, |acc, &(i, e)| acc * p[e as usize][i]);
        }
    }

    /// Gradient of `sum_h w_h Theta_h` with respect to the nine variables.
    pub fn weighted_gradient(&self, s: &[f64; VARIABLES], w: &[f64]) -> [f64; VARIABLES] {
        let p = self.powers(s);
        let mut g = [0.0; VARIABLES];
        for (f, &wh) in self.factors.iter().zip(w) {
            if wh == 0.0 {
                continue;
            }
            for (k, &(i, e)) in f.iter().enumerate() {
                let mut d = wh * e as f64 * p[e as usize - 1][i];
                for (k2, &(i2, e2)) in f.iter().enumerate() {
                    if k2 != k {
                        d *= p[e2 as usize][i2];
                    }
                }
                g[i] += d;
            }
        }
        g
    }
}

/// `Theta(x, t)` at one state; `0^0 = 1`.
pub fn evaluate_theta(lib: &TermLibrary, s: &StateAtPoint) -> Result<Vec<f64>> {
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("library inputs {s:?}")));
    }
    let mut out = vec![0.0; lib.len()];
    lib.evaluator().eval_into(&s.library_inputs(), &mut out);
    Ok(out)
}

/// Sparse coefficient vector; inactive entries are exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    values: Vec<f64>,
    active: Vec<bool>,
}

impl Coefficients {
    /// All zero, all active.
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            active: vec![true; len],
        }
    }

    /// Entries whose mask is false are forced to zero.
    pub fn new(mut values: Vec<f64>, active: Vec<bool>) -> Result<Self> {
        if values.len() != active.len() {
            return Err(Error::LengthMismatch {
                expected: values.len(),
                got: active.len(),
            });
        }
        for (v, &a) in values.iter_mut().zip(&active) {
            if !a {
                *v = 0.0;
            }
        }
        Ok(Self { values, active })
    }

    /// Active exactly where `values` is nonzero.
    pub fn from_values(values: Vec<f64>) -> Self {
        let active = values.iter().map(|v| *v != 0.0).collect();
        Self { values, active }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.active[i]).collect()
    }

    /// Sets an active entry; writes to inactive entries are ignored.
    pub fn set(&mut self, i: usize, value: f64) {
        if self.active[i] {
            self.values[i] = value;
        }
    }

    pub fn deactivate(&mut self, i: usize) {
        self.active[i] = false;
        self.values[i] = 0.0;
    }

    /// Sum of absolute values over active entries.
    pub fn l1(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.active)
            .filter(|(_, a)| **a)
            .map(|(v, _)| v.abs())
            .sum()
    }
}

/// `Theta^T xi` over active entries, in library order.
pub fn rhs(theta: &[f64], xi: &Coefficients) -> Result<f64> {
    if theta.len() != xi.len() {
        return Err(Error::LengthMismatch {
            expected: xi.len(),
            got: theta.len(),
        });
    }
    Ok(theta
        .iter()
        .zip(&xi.values)
        .zip(&xi.active)
        .filter(|(_, a)| **a)
        .map(|((t, v), _)| t * v)
        .sum())
}

/// Two significant digits, Unicode minus signs: `-0.014` -> `1.4e−2` with
/// the sign returned separately.
fn format_magnitude(v: f64) -> String {
    format!("{:.1e}", v.abs()).replace('-', "−")
}

/// Human-readable equation over the active, nonzero terms in library order.
pub fn format_pde(lib: &TermLibrary, xi: &Coefficients) -> String {
    let mut out = String::from("∂t o =");
    let mut first = true;
    for (i, term) in lib.terms.iter().enumerate() {
        let v = xi.values[i];
        if !xi.active[i] || v == 0.0 {
            continue;
        }
        let sign = if v < 0.0 { "−" } else { "+" };
        if first {
            out.push(' ');
            if v < 0.0 {
                out.push('−');
            }
        } else {
            let _ = write!(out, " {sign} ");
        }
        out.push_str(&format_magnitude(v));
        if term.degree() > 0 {
            out.push(' ');
            out.push_str(&term.name());
        }
        first = false;
    }
    if first {
        out.push_str(" 0");
    }
    out
}

fn parse_number(text: &str) -> Result<f64> {
    text.replace('−', "-")
        .parse::<f64>()
        .map_err(|_| Error::EquationParse(format!("bad coefficient `{text}`")))
}

/// Inverse of [`format_pde`]: terms not mentioned are inactive.
pub fn parse_pde(lib: &TermLibrary, text: &str) -> Result<Coefficients> {
    let rest = text
        .trim()
        .strip_prefix("∂t o =")
        .ok_or_else(|| Error::EquationParse("expected `∂t o =` prefix".into()))?
        .trim();
    let mut values = vec![0.0; lib.len()];
    let mut active = vec![false; lib.len()];
    if rest == "0" {
        return Coefficients::new(values, active);
    }
    let names: HashMap<String, usize> = lib.terms.iter().enumerate().map(|(i, t)| (t.name(), i)).collect();
    // split into signed chunks at the " + " / " − " separators
    let mut chunks: Vec<(f64, String)> = Vec::new();
    let (mut sign, mut body) = match rest.strip_prefix('−') {
        Some(b) => (-1.0, b),
        None => (1.0, rest),
    };
    loop {
        let next = [(" + ", 1.0), (" − ", -1.0)]
            .iter()
            .filter_map(|(sep, s)| body.find(sep).map(|p| (p, sep.len(), *s)))
            .min_by_key(|(p, _, _)| *p);
        match next {
            Some((p, len, s)) => {
                chunks.push((sign, body[..p].to_string()));
                sign = s;
                body = &body[p + len..];
            }
            None => {
                chunks.push((sign, body.to_string()));
                break;
            }
        }
    }
    for (sign, chunk) in chunks {
        let chunk = chunk.trim();
        let (num, name) = match chunk.split_once(' ') {
            Some((n, m)) => (n, m.trim()),
            None => (chunk, "1"),
        };
        let idx = *names
            .get(name)
            .ok_or_else(|| Error::EquationParse(format!("unknown term `{name}`")))?;
        if active[idx] {
            return Err(Error::EquationParse(format!("term `{name}` appears twice")));
        }
        values[idx] = sign * parse_number(num)?;
        active[idx] = true;
    }
    Coefficients::new(values, active)
}

/// Coefficients converted from normalized variables to physical ones, with
/// time measured in grid steps. Every normalized monomial expands, through
/// the affine maps of its factors, into physical monomials of equal or lower
/// degree, which the library already contains.
pub fn denormalize_coefficients(
    lib: &TermLibrary,
    xi: &Coefficients,
    norm: &NormalizationParams,
    dt_minutes: f64,
) -> Result<Vec<f64>> {
    // normalized variable = alpha * physical + beta
    let (sx, so, sq, sv) = (norm.x.scale, norm.o.scale, norm.q.scale, norm.v.scale);
    let field = |a: &crate::grid::Affine| (1.0 / a.scale, -a.shift / a.scale);
    let affine: [(f64, f64); VARIABLES] = [
        field(&norm.o),
        field(&norm.q),
        field(&norm.v),
        (sx / so, 0.0),
        (sx / sq, 0.0),
        (sx / sv, 0.0),
        (sx * sx / so, 0.0),
        (sx * sx / sq, 0.0),
        (sx * sx / sv, 0.0),
    ];
    // d o / d t_step = so / st * dt * d o_n / d t_n
    let lhs = so / norm.t.scale * dt_minutes;
    let mut out = vec![0.0; lib.len()];
    for (h, term) in lib.terms.iter().enumerate() {
        if !xi.active[h] || xi.values[h] == 0.0 {
            continue;
        }
        let mut poly: Vec<(ExponentVector, f64)> = vec![(ExponentVector([0; VARIABLES]), xi.values[h] * lhs)];
        for (i, &e) in term.0.iter().enumerate() {
            let (alpha, beta) = affine[i];
            for _ in 0..e {
                let mut next = Vec::with_capacity(poly.len() * 2);
                for (mono, c) in &poly {
                    let mut up = *mono;
                    up.0[i] += 1;
                    next.push((up, c * alpha));
                    if beta != 0.0 {
                        next.push((*mono, c * beta));
                    }
                }
                poly = next;
            }
        }
        for (mono, c) in poly {
            let idx = lib
                .index_of(&mono)
                .ok_or_else(|| Error::InvalidLibrary(format!("expansion left the library at {}", mono.name())))?;
            out[idx] += c;
        }
    }
    Ok(out)
}

/// One row of the coefficient file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEntry {
    pub exponents: ExponentVector,
    pub term: String,
    pub value: f64,
    pub active: bool,
    /// Same term in physical units (time in grid steps).
    pub physical_value: f64,
}

/// Machine-readable discovered equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFile {
    pub max_order: u32,
    pub derivative_order: u32,
    pub equation: String,
    pub equation_physical: String,
    pub terms: Vec<CoefficientEntry>,
    pub normalization: NormalizationParams,
    pub dt_minutes: f64,
}

impl CoefficientFile {
    pub fn new(lib: &TermLibrary, xi: &Coefficients, norm: &NormalizationParams, dt_minutes: f64) -> Result<Self> {
        let physical = denormalize_coefficients(lib, xi, norm, dt_minutes)?;
        let phys_coeffs = Coefficients::from_values(physical.clone());
        Ok(Self {
            max_order: lib.max_order,
            derivative_order: lib.derivative_order,
            equation: format_pde(lib, xi),
            equation_physical: format_pde(lib, &phys_coeffs),
            terms: lib
                .terms
                .iter()
                .enumerate()
                .map(|(i, t)| CoefficientEntry {
                    exponents: *t,
                    term: t.name(),
                    value: xi.values[i],
                    active: xi.active[i],
                    physical_value: physical[i],
                })
                .collect(),
            normalization: *norm,
            dt_minutes,
        })
    }

    pub fn library(&self) -> Result<TermLibrary> {
        let lib = enumerate_terms(self.max_order, self.derivative_order)?;
        if lib.len() != self.terms.len() || lib.terms.iter().zip(&self.terms).any(|(a, b)| *a != b.exponents) {
            return Err(Error::InvalidLibrary(
                "coefficient file terms do not match the library order".into(),
            ));
        }
        Ok(lib)
    }

    pub fn coefficients(&self) -> Result<Coefficients> {
        Coefficients::new(
            self.terms.iter().map(|t| t.value).collect(),
            self.terms.iter().map(|t| t.active).collect(),
        )
    }

    pub fn physical_coefficients(&self) -> Coefficients {
        Coefficients::from_values(self.terms.iter().map(|t| t.physical_value).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Affine;
    use proptest::prelude::*;

    /// Independent count: all 9-tuples over the allowed variables with
    /// degree <= n, by brute force over a box.
    fn brute_force(n: u32, m: u32) -> usize {
        let vars = variables_for(m);
        let mut count = 0;
        let total = (n as usize + 1).pow(vars as u32);
        for code in 0..total {
            let mut c = code;
            let mut deg = 0;
            for _ in 0..vars {
                deg += (c % (n as usize + 1)) as u32;
                c /= n as usize + 1;
            }
            if deg <= n {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn library_sizes() {
        assert_eq!(enumerate_terms(1, 2).unwrap().len(), 10);
        assert_eq!(enumerate_terms(2, 2).unwrap().len(), 55);
        assert_eq!(enumerate_terms(3, 2).unwrap().len(), 220);
        assert_eq!(enumerate_terms(2, 1).unwrap().len(), 28);
        assert_eq!(brute_force(2, 2), 55);
        assert_eq!(brute_force(2, 1), 28);
        assert!(enumerate_terms(0, 2).is_err());
        assert!(enumerate_terms(2, 3).is_err());
    }

    #[test]
    fn ordering_is_graded_and_unique() {
        let lib = enumerate_terms(2, 2).unwrap();
        assert_eq!(lib.terms()[0].degree(), 0);
        for i in 0..VARIABLES {
            assert_eq!(lib.terms()[1 + i], ExponentVector::unit(i));
        }
        assert!(lib.terms().windows(2).all(|w| w[0].degree() <= w[1].degree()));
        let mut sorted = lib.terms().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 55);
        let o_ox = ExponentVector([1, 0, 0, 1, 0, 0, 0, 0, 0]);
        assert_eq!(lib.terms().iter().filter(|t| **t == o_ox).count(), 1);
        assert_eq!(lib.terms()[10], ExponentVector([2, 0, 0, 0, 0, 0, 0, 0, 0]));
        // a first-order library never touches second derivatives
        let first = enumerate_terms(2, 1).unwrap();
        assert!(first.terms().iter().all(|t| t.0[6..].iter().all(|e| *e == 0)));
    }

    fn state(vals: [f64; 9]) -> StateAtPoint {
        StateAtPoint {
            o: vals[0],
            q: vals[1],
            v: vals[2],
            o_x: vals[3],
            q_x: vals[4],
            v_x: vals[5],
            o_xx: vals[6],
            q_xx: vals[7],
            v_xx: vals[8],
            o_t: 0.0,
        }
    }

    #[test]
    fn theta_basics() {
        let lib = enumerate_terms(2, 2).unwrap();
        let zero = evaluate_theta(&lib, &state([0.0; 9])).unwrap();
        assert_eq!(zero[0], 1.0);
        assert!(zero[1..].iter().all(|v| *v == 0.0));
        let mut s = [0.0; 9];
        s[0] = 2.0;
        let th = evaluate_theta(&lib, &state(s)).unwrap();
        let nonzero: Vec<f64> = th.iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(nonzero, vec![1.0, 2.0, 4.0]);
        s[4] = f64::NAN;
        assert!(evaluate_theta(&lib, &state(s)).is_err());
    }

    #[test]
    fn theta_matches_power_products() {
        let lib = enumerate_terms(3, 2).unwrap();
        let s = [0.3, -1.2, 0.8, 2.1, -0.4, 0.05, 1.7, -0.9, 0.6];
        let th = evaluate_theta(&lib, &state(s)).unwrap();
        for (t, v) in lib.terms().iter().zip(&th) {
            let direct: f64 = t.0.iter().zip(&s).map(|(&e, &x)| x.powi(e as i32)).product();
            assert!((v - direct).abs() <= 1e-14 * direct.abs().max(1e-300));
        }
    }

    #[test]
    fn weighted_gradient_matches_finite_differences() {
        let lib = enumerate_terms(2, 2).unwrap();
        let ev = lib.evaluator();
        let s = [0.3, -1.2, 0.8, 2.1, -0.4, 0.05, 1.7, -0.9, 0.6];
        let w: Vec<f64> = (0..lib.len()).map(|h| ((h * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let f = |s: &[f64; 9]| {
            let mut th = vec![0.0; lib.len()];
            ev.eval_into(s, &mut th);
            th.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = ev.weighted_gradient(&s, &w);
        for i in 0..9 {
            let mut p = s;
            p[i] += 1e-6;
            let mut m = s;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((g[i] - fd).abs() < 1e-7, "var {i}");
        }
    }

    #[test]
    fn rhs_and_masks() {
        let lib = enumerate_terms(2, 2).unwrap();
        let th = evaluate_theta(&lib, &state([0.5; 9])).unwrap();
        assert_eq!(rhs(&th, &Coefficients::zeros(55)).unwrap(), 0.0);
        let mut c = Coefficients::zeros(55);
        for i in 1..55 {
            c.deactivate(i);
        }
        c.set(0, 0.057);
        assert_eq!(rhs(&th, &c).unwrap(), 0.057);
        assert!(rhs(&th[..10], &c).is_err());
        let masked = Coefficients::new(vec![0.1, 0.5], vec![true, false]).unwrap();
        assert_eq!(masked.values(), &[0.1, 0.0]);
        assert_eq!(masked.l1(), 0.1);
        let mut m = masked.clone();
        m.set(1, 3.0);
        assert_eq!(m.values()[1], 0.0);
    }

    #[test]
    fn formatting() {
        let lib = enumerate_terms(2, 2).unwrap();
        let mut values = vec![0.0; 55];
        values[4] = -0.014;
        let c = Coefficients::from_values(values);
        assert_eq!(format_pde(&lib, &c), "∂t o = −1.4e−2 ∂x o");
        assert_eq!(format_pde(&lib, &Coefficients::zeros(55)), "∂t o = 0");
        let mut values = vec![0.0; 55];
        values[0] = 0.057;
        values[4] = -0.5;
        values[7] = 0.05;
        let sq = lib.index_of(&ExponentVector([0, 0, 0, 2, 0, 0, 0, 0, 0])).unwrap();
        values[sq] = 1.21e-3;
        let text = format_pde(&lib, &Coefficients::from_values(values));
        assert_eq!(text, "∂t o = 5.7e−2 − 5.0e−1 ∂x o + 5.0e−2 ∂x² o + 1.2e−3 (∂x o)^2");
    }

    #[test]
    fn signed_equation_round_trips() {
        let lib = enumerate_terms(2, 2).unwrap();
        // the displayed shape of a dense real-data result: mixed signs and magnitudes
        let picks = [
            (0, 5.7e-2),
            (4, -1.4e-2),
            (5, 3.1e-3),
            (13, -2.2e-4),
            (30, 8.8e-1),
            (54, -6.0e-5),
        ];
        let mut values = vec![0.0; 55];
        for (i, v) in picks {
            values[i] = v;
        }
        let c = Coefficients::from_values(values);
        let text = format_pde(&lib, &c);
        let back = parse_pde(&lib, &text).unwrap();
        assert_eq!(back, c);
        assert_eq!(format_pde(&lib, &back), text);
        assert_eq!(parse_pde(&lib, "∂t o = 0").unwrap().active_count(), 0);
        assert!(parse_pde(&lib, "∂t q = 1.0e0").is_err());
        assert!(parse_pde(&lib, "∂t o = 1.0e0 ∂y o").is_err());
    }

    #[test]
    fn denormalization_of_linear_pde() {
        let lib = enumerate_terms(2, 2).unwrap();
        let norm = NormalizationParams {
            x: Affine {
                shift: 16.0,
                scale: 16.0,
            },
            t: Affine {
                shift: 720.0,
                scale: 360.0,
            },
            o: Affine {
                shift: 10.0,
                scale: 4.0,
            },
            q: Affine {
                shift: 200.0,
                scale: 50.0,
            },
            v: Affine {
                shift: 55.0,
                scale: 6.0,
            },
        };
        let mut values = vec![0.0; 55];
        values[4] = -0.5;
        values[7] = 0.05;
        let phys = denormalize_coefficients(&lib, &Coefficients::from_values(values), &norm, 3.0).unwrap();
        // d o / d step = so/st*dt * (-0.5 * sx/so o_x + 0.05 * sx^2/so o_xx)
        let lhs = 4.0 / 360.0 * 3.0;
        assert!((phys[4] - lhs * -0.5 * 16.0 / 4.0).abs() < 1e-15);
        assert!((phys[7] - lhs * 0.05 * 256.0 / 4.0).abs() < 1e-15);
        assert_eq!(phys.iter().filter(|v| **v != 0.0).count(), 2);
    }

    proptest! {
        #[test]
        fn theta_is_homogeneous(s in prop::array::uniform9(-2.0f64..2.0), scale in 0.1f64..3.0) {
            let lib = enumerate_terms(2, 2).unwrap();
            let base = evaluate_theta(&lib, &state(s)).unwrap();
            let scaled = evaluate_theta(&lib, &state(s.map(|v| v * scale))).unwrap();
            for ((t, b), sc) in lib.terms().iter().zip(&base).zip(&scaled) {
                let expect = b * scale.powi(t.degree() as i32);
                prop_assert!((sc - expect).abs() <= 1e-12 * expect.abs().max(1e-12));
            }
        }

        #[test]
        fn rhs_is_linear(
            th in prop::collection::vec(-2.0f64..2.0, 55),
            a in prop::collection::vec(-1.0f64..1.0, 55),
            b in prop::collection::vec(-1.0f64..1.0, 55),
            ka in -3.0f64..3.0,
            kb in -3.0f64..3.0,
        ) {
            let comb: Vec<f64> = a.iter().zip(&b).map(|(x, y)| ka * x + kb * y).collect();
            let lhs = rhs(&th, &Coefficients::new(comb, vec![true; 55]).unwrap()).unwrap();
            let ra = rhs(&th, &Coefficients::new(a.clone(), vec![true; 55]).unwrap()).unwrap();
            let rb = rhs(&th, &Coefficients::new(b.clone(), vec![true; 55]).unwrap()).unwrap();
            prop_assert!((lhs - (ka * ra + kb * rb)).abs() < 1e-12);
        }

        #[test]
        fn physical_and_normalized_rhs_agree(s in prop::array::uniform9(-1.0f64..1.0)) {
            let lib = enumerate_terms(2, 2).unwrap();
            let norm = NormalizationParams {
                x: Affine { shift: 16.0, scale: 16.0 },
                t: Affine { shift: 720.0, scale: 360.0 },
                o: Affine { shift: 10.0, scale: 4.0 },
                q: Affine { shift: 200.0, scale: 50.0 },
                v: Affine { shift: 55.0, scale: 6.0 },
            };
            let values: Vec<f64> = (0..55).map(|h| ((h * 13 % 17) as f64 - 8.0) / 40.0).collect();
            let xi = Coefficients::from_values(values);
            let phys = Coefficients::from_values(denormalize_coefficients(&lib, &xi, &norm, 3.0).unwrap());
            // physical state from the normalized one
            let aff = [
                (norm.o.scale, norm.o.shift), (norm.q.scale, norm.q.shift), (norm.v.scale, norm.v.shift),
                (4.0 / 16.0, 0.0), (50.0 / 16.0, 0.0), (6.0 / 16.0, 0.0),
                (4.0 / 256.0, 0.0), (50.0 / 256.0, 0.0), (6.0 / 256.0, 0.0),
            ];
            let mut p = [0.0; 9];
            for i in 0..9 {
                p[i] = s[i] * aff[i].0 + aff[i].1;
            }
            let n_rhs = rhs(&evaluate_theta(&lib, &state(s)).unwrap(), &xi).unwrap();
            let p_rhs = rhs(&evaluate_theta(&lib, &state(p)).unwrap(), &phys).unwrap();
            let expect = n_rhs * 4.0 / 360.0 * 3.0;
            prop_assert!((p_rhs - expect).abs() < 1e-9 * expect.abs().max(1.0));
        }
    }
}
