//! Batched forward propagation of truncated second-order Taylor jets through
//! a [`RationalMlp`], and the matching reverse pass.
//!
//! A jet carries one value channel, `p` first-order directional channels and
//! a list of second-order channels, each the mixed derivative along a pair of
//! directions. Activations for a batch of `B` points are stored row-major as
//! `width x (channels * B)`: every row holds the channel blocks back to back,
//! each block contiguous over the batch. Affine layers then become one GEMM
//! per layer regardless of the number of channels; the bias only touches the
//! value block.

use matrixmultiply::dgemm;

use crate::error::{Error, Result};
use crate::rational::{RationalMlp, DENOMINATOR_FLOOR};

/// Channel structure of a jet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JetLayout {
    directions: usize,
    pairs: Vec<(usize, usize)>,
}

impl JetLayout {
    pub fn new(directions: usize, pairs: Vec<(usize, usize)>) -> Self {
        for &(i, j) in &pairs {
            assert!(i <= j && j < directions, "bad second-order pair ({i}, {j})");
        }
        Self { directions, pairs }
    }

    pub fn channels(&self) -> usize {
        1 + self.directions + self.pairs.len()
    }

    pub fn directions(&self) -> usize {
        self.directions
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Channel index of first-order direction `i`.
    pub fn first(&self, i: usize) -> usize {
        1 + i
    }

    /// Channel index of second-order pair `k`.
    pub fn second(&self, k: usize) -> usize {
        1 + self.directions + k
    }
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct JetTape {
    layout: JetLayout,
    batch: usize,
    /// Input of every layer; `acts[0]` is the network input.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pres: Vec<Vec<f64>>,
    series: Vec<LayerSeries>,
    output: Vec<f64>,
}

impl JetTape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn layout(&self) -> &JetLayout {
        &self.layout
    }

    /// Output jet, `channels * batch` values.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.output[c * self.batch..(c + 1) * self.batch]
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Taylor data of one hidden layer's activation at its value channel, one
/// entry per (neuron, point): sigma and its first three derivatives, and the
/// Taylor coefficients of `1 / D` (needed for coefficient gradients).
#[derive(Debug, Clone)]
struct LayerSeries {
    s: [Vec<f64>; 4],
    r: [Vec<f64>; 3],
}

/// Scratch for the Horner passes of one row.
struct Horner {
    n: [Vec<f64>; 4],
    d: [Vec<f64>; 4],
}

impl Horner {
    fn new(batch: usize) -> Self {
        let v = || vec![0.0; batch];
        Self {
            n: [v(), v(), v(), v()],
            d: [v(), v(), v(), v()],
        }
    }
}

/// Taylor coefficients (orders 0..3) of a polynomial at each `m`.
fn horner(out: &mut [Vec<f64>; 4], coeffs: &[f64], m: &[f64]) {
    let n = m.len();
    let [p0, p1, p2, p3] = out;
    let (p0, p1, p2, p3) = (&mut p0[..n], &mut p1[..n], &mut p2[..n], &mut p3[..n]);
    p0.fill(0.0);
    p1.fill(0.0);
    p2.fill(0.0);
    p3.fill(0.0);
    for &c in coeffs.iter().rev() {
        for b in 0..n {
            let mb = m[b];
            p3[b] = p3[b] * mb + p2[b];
            p2[b] = p2[b] * mb + p1[b];
            p1[b] = p1[b] * mb + p0[b];
            p0[b] = p0[b] * mb + c;
        }
    }
}

/// Fills one row of `out` (offset `at`, length `m.len()`).
fn row_series(
    num: &[f64],
    den: &[f64],
    m: &[f64],
    h: &mut Horner,
    out: &mut LayerSeries,
    at: usize,
    layer: usize,
) -> Result<()> {
    let n = m.len();
    horner(&mut h.n, num, m);
    horner(&mut h.d, den, m);
    if let Some(b) = h.d[0][..n].iter().position(|d| !(d.abs() >= DENOMINATOR_FLOOR)) {
        return Err(Error::DegenerateActivation {
            m: m[b],
            denominator: h.d[0][b].abs(),
            layer: Some(layer),
        });
    }
    let [n0, n1, n2, n3] = &h.n;
    let [d0, d1, d2, d3] = &h.d;
    let (n0, n1, n2, n3) = (&n0[..n], &n1[..n], &n2[..n], &n3[..n]);
    let (d0, d1, d2, d3) = (&d0[..n], &d1[..n], &d2[..n], &d3[..n]);
    let [s0, s1, s2, s3] = &mut out.s;
    let [r0, r1, r2] = &mut out.r;
    let (s0, s1, s2, s3) = (
        &mut s0[at..at + n],
        &mut s1[at..at + n],
        &mut s2[at..at + n],
        &mut s3[at..at + n],
    );
    let (r0, r1, r2) = (&mut r0[at..at + n], &mut r1[at..at + n], &mut r2[at..at + n]);
    for b in 0..n {
        let i0 = 1.0 / d0[b];
        let i1 = -d1[b] * i0 * i0;
        let i2 = -(d1[b] * i1 + d2[b] * i0) * i0;
        let q0 = n0[b] * i0;
        let q1 = (n1[b] - q0 * d1[b]) * i0;
        let q2 = (n2[b] - q0 * d2[b] - q1 * d1[b]) * i0;
        let q3 = (n3[b] - q0 * d3[b] - q1 * d2[b] - q2 * d1[b]) * i0;
        s0[b] = q0;
        s1[b] = q1;
        s2[b] = 2.0 * q2;
        s3[b] = 6.0 * q3;
        r0[b] = i0;
        r1[b] = i1;
        r2[b] = i2;
    }
    Ok(())
}

fn block(row: &[f64], c: usize, batch: usize) -> &[f64] {
    &row[c * batch..(c + 1) * batch]
}

fn block_mut(row: &mut [f64], c: usize, batch: usize) -> &mut [f64] {
    &mut row[c * batch..(c + 1) * batch]
}

/// Forward pass of a jet batch. `input` is `input_width x (channels * batch)`.
pub fn forward(net: &RationalMlp, layout: &JetLayout, input: Vec<f64>, batch: usize) -> Result<JetTape> {
    let cols = layout.channels() * batch;
    if input.len() != net.input_width() * cols {
        return Err(Error::LengthMismatch {
            expected: net.input_width() * cols,
            got: input.len(),
        });
    }
    let hidden = net.hidden_layers();
    let mut acts = vec![input];
    let mut pres = Vec::with_capacity(hidden);
    let mut series = Vec::with_capacity(hidden);
    let mut scratch = Horner::new(batch);
    for l in 0..net.layer_count() {
        let lo = net.offsets(l);
        let mut z = vec![0.0; lo.fan_out * cols];
        gemm(
            lo.fan_out,
            lo.fan_in,
            cols,
            net.weights(l),
            (lo.fan_in, 1),
            &acts[l],
            (cols, 1),
            0.0,
            &mut z,
            (cols, 1),
        );
        for (r, &bias) in net.bias(l).iter().enumerate() {
            for v in &mut z[r * cols..r * cols + batch] {
                *v += bias;
            }
        }
        if l == hidden {
            return Ok(JetTape {
                layout: layout.clone(),
                batch,
                acts,
                pres,
                series,
                output: z,
            });
        }
        let (a, s) = activate(net, l, layout, &z, batch, &mut scratch)?;
        pres.push(z);
        acts.push(a);
        series.push(s);
    }
    unreachable!("network has an output layer")
}

fn activate(
    net: &RationalMlp,
    hidden: usize,
    layout: &JetLayout,
    z: &[f64],
    batch: usize,
    scratch: &mut Horner,
) -> Result<(Vec<f64>, LayerSeries)> {
    let (num, den) = net.activation_slices(hidden);
    let cols = layout.channels() * batch;
    let rows = z.len() / cols;
    let v = || vec![0.0; rows * batch];
    let mut s = LayerSeries {
        s: [v(), v(), v(), v()],
        r: [v(), v(), v()],
    };
    let mut a = vec![0.0; z.len()];
    for (row, (zr, ar)) in z.chunks_exact(cols).zip(a.chunks_exact_mut(cols)).enumerate() {
        let at = row * batch;
        row_series(num, den, &zr[..batch], scratch, &mut s, at, hidden)?;
        let s0 = &s.s[0][at..at + batch];
        let s1 = &s.s[1][at..at + batch];
        let s2 = &s.s[2][at..at + batch];
        ar[..batch].copy_from_slice(s0);
        for i in 0..layout.directions {
            let c = layout.first(i);
            let m = block(zr, c, batch);
            let out = block_mut(ar, c, batch);
            for b in 0..batch {
                out[b] = s1[b] * m[b];
            }
        }
        for (k, &(i, j)) in layout.pairs.iter().enumerate() {
            let c = layout.second(k);
            let (mi, mj, mk) = (
                block(zr, layout.first(i), batch),
                block(zr, layout.first(j), batch),
                block(zr, c, batch),
            );
            let out = block_mut(ar, c, batch);
            for b in 0..batch {
                out[b] = s2[b] * mi[b] * mj[b] + s1[b] * mk[b];
            }
        }
    }
    Ok((a, s))
}

/// Reverse pass. `grad_output` is the cotangent of the output jet
/// (`channels * batch`); parameter gradients are added into `grad`
/// (laid out like [`RationalMlp::params`]). Returns the input cotangent when
/// `want_input` is set.
pub fn backward(
    net: &RationalMlp,
    tape: &JetTape,
    grad_output: &[f64],
    grad: &mut [f64],
    want_input: bool,
) -> Result<Option<Vec<f64>>> {
    let batch = tape.batch;
    let cols = tape.layout.channels() * batch;
    if grad_output.len() != cols {
        return Err(Error::LengthMismatch {
            expected: cols,
            got: grad_output.len(),
        });
    }
    if grad.len() != net.param_count() {
        return Err(Error::LengthMismatch {
            expected: net.param_count(),
            got: grad.len(),
        });
    }
    let mut g = grad_output.to_vec();
    for l in (0..net.layer_count()).rev() {
        let lo = net.offsets(l);
        let a = &tape.acts[l];
        gemm(
            lo.fan_out,
            cols,
            lo.fan_in,
            &g,
            (cols, 1),
            a,
            (1, cols),
            1.0,
            &mut grad[lo.weights..lo.bias],
            (lo.fan_in, 1),
        );
        for r in 0..lo.fan_out {
            grad[lo.bias + r] += g[r * cols..r * cols + batch].iter().sum::<f64>();
        }
        if l == 0 && !want_input {
            return Ok(None);
        }
        let mut ga = vec![0.0; lo.fan_in * cols];
        gemm(
            lo.fan_in,
            lo.fan_out,
            cols,
            net.weights(l),
            (1, lo.fan_in),
            &g,
            (cols, 1),
            0.0,
            &mut ga,
            (cols, 1),
        );
        if l == 0 {
            return Ok(Some(ga));
        }
        g = activation_backward(net, l - 1, tape, &ga, grad);
    }
    unreachable!("loop returns at layer 0")
}

fn activation_backward(net: &RationalMlp, hidden: usize, tape: &JetTape, ga: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let layout = &tape.layout;
    let batch = tape.batch;
    let z = &tape.pres[hidden];
    let series = &tape.series[hidden];
    let (num, den) = net.activation_slices(hidden);
    let (noff, doff) = net.activation_offsets(hidden);
    let (nn, nd) = (num.len(), den.len());
    let cols = layout.channels() * batch;
    let mut gz = vec![0.0; z.len()];
    // per-point partial sums of the coefficient gradients, reduced at the end
    let mut acc = vec![vec![0.0; batch]; nn + nd];
    let mut w1 = vec![0.0; batch];
    let mut w2 = vec![0.0; batch];
    // [A, B, C] weights of m^k, k m^(k-1), k (k-1) m^(k-2) for both polynomials
    let mut wn = [vec![0.0; batch], vec![0.0; batch], vec![0.0; batch]];
    let mut wd = [vec![0.0; batch], vec![0.0; batch], vec![0.0; batch]];
    let mut pw = vec![0.0; batch];
    let mut pw1 = vec![0.0; batch];
    let mut pw2 = vec![0.0; batch];

    for (row, ((zr, gr), gzr)) in z
        .chunks_exact(cols)
        .zip(ga.chunks_exact(cols))
        .zip(gz.chunks_exact_mut(cols))
        .enumerate()
    {
        let at = row * batch;
        let [s0, s1, s2, s3] = &series.s;
        let (s0, s1, s2, s3) = (
            &s0[at..at + batch],
            &s1[at..at + batch],
            &s2[at..at + batch],
            &s3[at..at + batch],
        );
        let [r0, r1, r2] = &series.r;
        let (r0, r1, r2) = (&r0[at..at + batch], &r1[at..at + batch], &r2[at..at + batch]);
        let (w1, w2) = (&mut w1[..batch], &mut w2[..batch]);
        w1.fill(0.0);
        w2.fill(0.0);
        for i in 0..layout.directions {
            let c = layout.first(i);
            let (g, m) = (block(gr, c, batch), block(zr, c, batch));
            for b in 0..batch {
                w1[b] += g[b] * m[b];
            }
        }
        for (k, &(i, j)) in layout.pairs.iter().enumerate() {
            let c = layout.second(k);
            let (g, m, mi, mj) = (
                block(gr, c, batch),
                block(zr, c, batch),
                block(zr, layout.first(i), batch),
                block(zr, layout.first(j), batch),
            );
            for b in 0..batch {
                w1[b] += g[b] * m[b];
                w2[b] += g[b] * mi[b] * mj[b];
            }
        }
        let g0 = block(gr, 0, batch);
        {
            let out = block_mut(gzr, 0, batch);
            for b in 0..batch {
                out[b] = g0[b] * s1[b] + w1[b] * s2[b] + w2[b] * s3[b];
            }
        }
        for i in 0..layout.directions {
            let c = layout.first(i);
            let g = block(gr, c, batch);
            let out = block_mut(gzr, c, batch);
            for b in 0..batch {
                out[b] = g[b] * s1[b];
            }
        }
        for (k, &(i, j)) in layout.pairs.iter().enumerate() {
            let c = layout.second(k);
            let g = block(gr, c, batch);
            {
                let out = block_mut(gzr, c, batch);
                for b in 0..batch {
                    out[b] = g[b] * s1[b];
                }
            }
            let (ci, cj) = (layout.first(i), layout.first(j));
            for (target, partner) in [(ci, cj), (cj, ci)] {
                let m = block(zr, partner, batch);
                let out = block_mut(gzr, target, batch);
                for b in 0..batch {
                    out[b] += g[b] * s2[b] * m[b];
                }
            }
        }

        // d sigma / d theta as a Taylor series in m: numerator coefficient k
        // contributes m^k / D, denominator coefficient k contributes
        // -m^k sigma / D; sigma' and sigma'' see the series' higher terms.
        let [wa, wb, wc] = &mut wn;
        let [ta, tb, tc] = &mut wd;
        let (wa, wb, wc) = (&mut wa[..batch], &mut wb[..batch], &mut wc[..batch]);
        let (ta, tb, tc) = (&mut ta[..batch], &mut tb[..batch], &mut tc[..batch]);
        for b in 0..batch {
            let (q0, q1, q2) = (s0[b], s1[b], 0.5 * s2[b]);
            let t0 = q0 * r0[b];
            let t1 = q0 * r1[b] + q1 * r0[b];
            let t2 = q0 * r2[b] + q1 * r1[b] + q2 * r0[b];
            let (u0, u1, u2) = (g0[b], w1[b], 2.0 * w2[b]);
            wa[b] = u0 * r0[b] + u1 * r1[b] + u2 * r2[b];
            wb[b] = u1 * r0[b] + u2 * r1[b];
            wc[b] = w2[b] * r0[b];
            ta[b] = u0 * t0 + u1 * t1 + u2 * t2;
            tb[b] = u1 * t0 + u2 * t1;
            tc[b] = w2[b] * t0;
        }
        let m0 = block(zr, 0, batch);
        let (pw, pw1, pw2) = (&mut pw[..batch], &mut pw1[..batch], &mut pw2[..batch]);
        pw.fill(1.0);
        pw1.fill(0.0);
        pw2.fill(0.0);
        for k in 0..nn.max(nd) {
            let kf = k as f64;
            let kk = kf * (kf - 1.0);
            if k < nn {
                let acc_k = &mut acc[k][..batch];
                for b in 0..batch {
                    acc_k[b] += pw[b] * wa[b] + kf * pw1[b] * wb[b] + kk * pw2[b] * wc[b];
                }
            }
            if k < nd {
                let acc_k = &mut acc[nn + k][..batch];
                for b in 0..batch {
                    acc_k[b] += pw[b] * ta[b] + kf * pw1[b] * tb[b] + kk * pw2[b] * tc[b];
                }
            }
            pw2.copy_from_slice(pw1);
            pw1.copy_from_slice(pw);
            for (p, m) in pw.iter_mut().zip(m0) {
                *p *= m;
            }
        }
    }
    for k in 0..nn {
        grad[noff + k] += acc[k].iter().sum::<f64>();
    }
    for k in 0..nd {
        grad[doff + k] -= acc[nn + k].iter().sum::<f64>();
    }
    gz
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{init_networks, NetworkWidths};

    fn small_net(seed: u64) -> RationalMlp {
        let w = NetworkWidths {
            occupancy: vec![2, 6, 5, 1],
            flow: vec![3, 4, 1],
            speed: vec![3, 4, 1],
        };
        init_networks(&w, seed).unwrap().occupancy
    }

    /// x-direction, t-direction, xx pair.
    fn occ_layout() -> JetLayout {
        JetLayout::new(2, vec![(0, 0)])
    }

    fn occ_input(points: &[(f64, f64)]) -> Vec<f64> {
        let b = points.len();
        let mut v = vec![0.0; 2 * 4 * b];
        for (k, &(x, t)) in points.iter().enumerate() {
            v[k] = x;
            v[4 * b + k] = t;
            v[b + k] = 1.0;
            v[4 * b + 2 * b + k] = 1.0;
        }
        v
    }

    #[test]
    fn value_channel_matches_scalar_forward() {
        let net = small_net(1);
        let pts = [(0.1, -0.4), (0.9, 0.2), (-0.7, 0.0)];
        let tape = forward(&net, &occ_layout(), occ_input(&pts), 3).unwrap();
        for (k, &(x, t)) in pts.iter().enumerate() {
            let f = net.forward(&[x, t]).unwrap();
            assert!((tape.channel(0)[k] - f).abs() < 1e-13);
        }
    }

    #[test]
    fn jet_channels_match_finite_differences() {
        let net = small_net(2);
        let (x, t) = (0.3, -0.2);
        let tape = forward(&net, &occ_layout(), occ_input(&[(x, t)]), 1).unwrap();
        let f = |x: f64, t: f64| net.forward(&[x, t]).unwrap();
        let h = 1e-4;
        let fx = (f(x + h, t) - f(x - h, t)) / (2.0 * h);
        let ft = (f(x, t + h) - f(x, t - h)) / (2.0 * h);
        let fxx = (f(x + h, t) - 2.0 * f(x, t) + f(x - h, t)) / (h * h);
        assert!((tape.channel(1)[0] - fx).abs() < 1e-7);
        assert!((tape.channel(2)[0] - ft).abs() < 1e-7);
        assert!((tape.channel(3)[0] - fxx).abs() < 1e-4);
    }

    #[test]
    fn reverse_pass_matches_parameter_perturbation() {
        let net = small_net(3);
        let pts = [(0.2, 0.5), (-0.3, -0.8)];
        let layout = occ_layout();
        // scalar loss: sum over points and channels of c_k * out_k
        let weights = [0.7, -1.3, 0.4, 2.1];
        let loss = |n: &RationalMlp| {
            let tape = forward(n, &layout, occ_input(&pts), 2).unwrap();
            (0..4)
                .map(|c| weights[c] * tape.channel(c).iter().sum::<f64>())
                .sum::<f64>()
        };
        let tape = forward(&net, &layout, occ_input(&pts), 2).unwrap();
        let mut go = vec![0.0; 8];
        for c in 0..4 {
            go[2 * c] = weights[c];
            go[2 * c + 1] = weights[c];
        }
        let mut grad = vec![0.0; net.param_count()];
        backward(&net, &tape, &go, &mut grad, false).unwrap();
        for (idx, g) in grad.iter().enumerate() {
            let h = 1e-6 * net.params()[idx].abs().max(1.0);
            let mut p = net.clone();
            p.params_mut()[idx] += h;
            let mut m = net.clone();
            m.params_mut()[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!(
                (g - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "param {idx} ({}): {g} vs {fd}",
                net.block_of(idx)
            );
        }
    }

    #[test]
    fn input_cotangent_matches_input_perturbation() {
        let net = small_net(4);
        let layout = JetLayout::new(1, vec![(0, 0)]);
        // seeds along x only; perturb the value of the x row
        let input = |x: f64| vec![x, 1.0, 0.0, 0.25, 0.0, 0.0];
        let wts = [1.0, 0.5, -0.3];
        let loss = |x: f64| {
            let tape = forward(&net, &layout, input(x), 1).unwrap();
            (0..3).map(|c| wts[c] * tape.output()[c]).sum::<f64>()
        };
        let tape = forward(&net, &layout, input(0.4), 1).unwrap();
        let mut grad = vec![0.0; net.param_count()];
        let gi = backward(&net, &tape, &wts, &mut grad, true).unwrap().unwrap();
        let h = 1e-6;
        let fd = (loss(0.4 + h) - loss(0.4 - h)) / (2.0 * h);
        assert!((gi[0] - fd).abs() < 1e-7);
    }

    #[test]
    fn pole_reports_layer() {
        let mut net = RationalMlp::zeros(&[2, 2, 2, 1], 1, 1).unwrap();
        // second hidden layer: D(m) = m - 0 has a pole at the zero pre-activation
        let (_, d) = net.activation_offsets(1);
        net.params_mut()[d] = 0.0;
        net.params_mut()[d + 1] = 1.0;
        let err = forward(&net, &occ_layout(), occ_input(&[(0.1, 0.1)]), 1).unwrap_err();
        assert!(
            matches!(err, Error::DegenerateActivation { layer: Some(1), .. }),
            "{err}"
        );
    }
}
