#![allow(dead_code)]

use admitlearn::admittance::{AdmittanceParams, ErrorState};
use admitlearn::cost::CostWeights;
use admitlearn::force_window::ForceWindow;
use admitlearn::optimizer::{OptProblem, SearchBounds};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DT: f64 = 0.01;

/// Single-axis window cost, written out directly: semi-implicit Euler on
/// `m ë + D ė + K e = f`, time-weighted absolute errors including both ends.
pub fn direct_cost(gains: [f64; 3], x0: (f64, f64), forces: &[f64], w: f64) -> f64 {
    let [m, k, d] = gains;
    let (mut e, mut v) = x0;
    let mut c = 0.0;
    for j in 0..=forces.len() {
        let t = j as f64 * DT;
        c += t * DT * (w * e.abs() + (1.0 - w) * v.abs());
        if j == forces.len() {
            break;
        }
        v += DT * (forces[j] - d * v - k * e) / m;
        e += DT * v;
    }
    c
}

pub fn window(forces: &[f64]) -> ForceWindow {
    let mut win = ForceWindow::new(forces.len(), DT).unwrap();
    for (i, f) in forces.iter().enumerate() {
        win.record(i as f64 * DT, &[*f]).unwrap();
    }
    win
}

/// A one-axis replay problem on the default gain box.
pub fn problem(gains: [f64; 3], x0: (f64, f64), forces: &[f64], w: f64, budget: usize) -> OptProblem {
    let u = AdmittanceParams::new(vec![gains[0]], vec![gains[1]], vec![gains[2]])
        .unwrap()
        .to_param_vector();
    OptProblem::replay(
        u,
        ErrorState::new(vec![x0.0], vec![x0.1]).unwrap(),
        window(forces),
        CostWeights::new(w, forces.len() as f64 * DT).unwrap(),
        &SearchBounds::default(),
        budget,
    )
}

pub struct Case {
    pub gains: [f64; 3],
    pub x0: (f64, f64),
    pub forces: Vec<f64>,
    pub w: f64,
}

/// A contact-like window: a train of impacts, a sustained press, or sensor
/// noise around zero, from a random stable starting gain.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = 100;
    let kind = seed % 3;
    let forces: Vec<f64> = match kind {
        0 => {
            let amp = rng.random_range(20.0..120.0);
            let period = rng.random_range(10..40);
            let width = (period as f64 * rng.random_range(0.2..0.5)) as usize + 1;
            let phase = rng.random_range(0..period);
            (0..steps)
                .map(|j| {
                    let p = (j + phase) % period;
                    if p < width {
                        amp * (std::f64::consts::PI * p as f64 / width as f64).sin()
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        1 => {
            let level = rng.random_range(-30.0..30.0);
            let start = rng.random_range(0..50);
            (0..steps)
                .map(|j| if j >= start { level } else { 0.0 } + rng.random_range(-0.5..0.5))
                .collect()
        }
        _ => (0..steps).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    let m: f64 = 10f64.powf(rng.random_range(-0.7..0.7));
    let k: f64 = 10f64.powf(rng.random_range(1.3..3.5));
    let zeta: f64 = rng.random_range(0.3..2.0);
    let d = (2.0 * zeta * (m * k).sqrt()).clamp(1.0, 500.0);
    Case {
        gains: [m, k, d],
        x0: (rng.random_range(-0.005..0.005), rng.random_range(-0.05..0.05)),
        forces,
        w: rng.random_range(0.0..=1.0),
    }
}

/// `n` log-spaced values spanning `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || lo == hi {
        return vec![lo];
    }
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Exhaustive search of [`direct_cost`] over an `n`-per-parameter log grid
/// of the problem's gain box.
pub fn grid_best(p: &OptProblem, x0: (f64, f64), forces: &[f64], w: f64, n: usize) -> (f64, [f64; 3]) {
    let ms = log_grid(p.lower[0], p.upper[0], n);
    let ks = log_grid(p.lower[1], p.upper[1], n);
    let ds = log_grid(p.lower[2], p.upper[2], n);
    let mut best = (f64::INFINITY, [0.0; 3]);
    for &m in &ms {
        for &k in &ks {
            for &d in &ds {
                let c = direct_cost([m, k, d], x0, forces, w);
                if c < best.0 {
                    best = (c, [m, k, d]);
                }
            }
        }
    }
    best
}
