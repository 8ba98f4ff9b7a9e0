//! Network derivatives against Richardson-extrapolated finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use traffic_pde::derivatives::{composite_jet, occupancy_jet, state_at};
use traffic_pde::rational::init_networks;
use traffic_pde::{FieldTriplet, NetworkWidths, Result};

/// Step of the coarser difference; the finer one uses `H / 2`.
pub const H: f64 = 1e-2;
/// Magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub const COMPONENTS: [&str; 10] = [
    "o_x", "o_t", "o_xx", "q_x", "q_t", "q_xx", "v_x", "v_t", "v_xx", "chain",
];

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(a.abs()).max(REL_FLOOR)
}

fn richardson_first(f: &impl Fn(f64) -> f64, x: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(H / 2.0) - d(H)) / 3.0
}

fn richardson_second(f: &impl Fn(f64) -> f64, x: f64) -> f64 {
    let d = |h: f64| (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
    (4.0 * d(H / 2.0) - d(H)) / 3.0
}

/// One compared quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub component: &'static str,
    pub engine: f64,
    pub oracle: f64,
}

impl Comparison {
    pub fn rel_err(&self) -> f64 {
        rel_err(self.engine, self.oracle)
    }

    pub fn second_order(&self) -> bool {
        self.component.ends_with("xx")
    }
}

fn field(nets: &FieldTriplet, k: usize, x: f64, t: f64) -> f64 {
    let o = nets.occupancy.forward(&[x, t]).expect("finite occupancy");
    match k {
        0 => o,
        1 => nets.flow.forward(&[o, x, t]).expect("finite flow"),
        _ => nets.speed.forward(&[o, x, t]).expect("finite speed"),
    }
}

/// All derivative comparisons at one point. The last entry compares the
/// chain-rule `q_xx` with direct differentiation of the composite map.
pub fn compare_at(nets: &FieldTriplet, x: f64, t: f64) -> Result<Vec<Comparison>> {
    let s = state_at(nets, x, t)?;
    let engine = [[s.o_x, s.o_t, s.o_xx], [s.q_x, 0.0, s.q_xx], [s.v_x, 0.0, s.v_xx]];
    let occ = occupancy_jet(&nets.occupancy, x, t)?;
    let q_direct = composite_jet(&nets.occupancy, &nets.flow, x, t)?;
    let v_direct = composite_jet(&nets.occupancy, &nets.speed, x, t)?;
    let time_engine = [occ.d_dt, q_direct.d_dt, v_direct.d_dt];
    let mut out = Vec::with_capacity(COMPONENTS.len());
    for k in 0..3 {
        let fx = |y: f64| field(nets, k, y, t);
        let ft = |u: f64| field(nets, k, x, u);
        out.push(Comparison {
            component: COMPONENTS[3 * k],
            engine: engine[k][0],
            oracle: richardson_first(&fx, x),
        });
        out.push(Comparison {
            component: COMPONENTS[3 * k + 1],
            engine: time_engine[k],
            oracle: richardson_first(&ft, t),
        });
        out.push(Comparison {
            component: COMPONENTS[3 * k + 2],
            engine: engine[k][2],
            oracle: richardson_second(&fx, x),
        });
    }
    out.push(Comparison {
        component: COMPONENTS[9],
        engine: s.q_xx,
        oracle: q_direct.d2_dx2,
    });
    Ok(out)
}

/// Worst relative error per component over `count` seeded triplets, one
/// random interior point each.
pub fn run(widths: &NetworkWidths, first_seed: u64, count: usize) -> Result<Vec<(&'static str, f64)>> {
    let mut worst = vec![0.0f64; COMPONENTS.len()];
    for i in 0..count as u64 {
        let seed = first_seed.wrapping_add(i);
        let nets = init_networks(widths, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rng.random_range(-0.9..0.9);
        let t = rng.random_range(-0.9..0.9);
        for (k, c) in compare_at(&nets, x, t)?.iter().enumerate() {
            worst[k] = worst[k].max(c.rel_err());
        }
    }
    Ok(COMPONENTS.iter().copied().zip(worst).collect())
}

/// Tolerance applied to a component.
pub fn tolerance(component: &str) -> f64 {
    if component == "chain" {
        1e-8
    } else if component.ends_with("xx") {
        1e-3
    } else {
        1e-5
    }
}
