//! Residual admittance optimization over a replayed force window.
//!
//! Minimizes the windowed cost over `δu` with `u_init + δu` positive. The
//! search runs over log gains `(ln m, ln K, ln D)`, a linear map of `ln u`,
//! so positivity cannot be lost and gain ranges are box bounds. Directions come
//! from a projected BFGS model; gradients are exact derivatives of the
//! discrete rollout, obtained by propagating forward sensitivities of the
//! semi-implicit Euler recursion alongside the state.

use serde::{Deserialize, Serialize};

use crate::admittance::{axis_accel, ErrorState, ParamVector};
use crate::cost::CostWeights;
use crate::error::{Error, Result};
use crate::force_window::{ForceWindow, LinearForceModel};

/// Source of external force inside optimization rollouts.
#[derive(Debug, Clone, PartialEq)]
pub enum ForceProvider {
    /// Recorded forces, replayed verbatim (last sample held).
    Replay(ForceWindow),
    /// Force predicted from the rolled-out tool state by a fitted model.
    /// `desired[k]` is the desired pose and velocity at step `k`.
    Linear {
        model: LinearForceModel,
        desired: Vec<(Vec<f64>, Vec<f64>)>,
    },
}

impl ForceProvider {
    fn steps(&self) -> usize {
        match self {
            ForceProvider::Replay(w) => w.len(),
            ForceProvider::Linear { desired, .. } => desired.len(),
        }
    }
}

/// Per-update search region, stated on the physical gains `(m, K, D)`.
///
/// Each gain stays inside its absolute range and, if `trust_ratio` is set,
/// moves by at most that factor per update. The ranges must keep every entry
/// of `u` at or above `epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBounds {
    /// Hard floor for every entry of `u`.
    pub epsilon: f64,
    #[serde(default)]
    pub trust_ratio: Option<f64>,
    /// Virtual mass range, kg.
    pub mass: (f64, f64),
    /// Stiffness range, N/m.
    pub stiffness: (f64, f64),
    /// Damping range, N·s/m.
    pub damping: (f64, f64),
}

impl Default for SearchBounds {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            trust_ratio: None,
            mass: (0.1, 10.0),
            stiffness: (10.0, 5000.0),
            damping: (1.0, 500.0),
        }
    }
}

impl SearchBounds {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.mass, self.stiffness, self.damping];
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.trust_ratio.is_some_and(|r| !(r >= 1.0)) {
            return Err(Error::Config("trust_ratio must be ≥ 1".into()));
        }
        if ranges.iter().any(|(lo, hi)| !(lo > &0.0 && lo <= hi)) {
            return Err(Error::Config("gain ranges must satisfy 0 < lo ≤ hi".into()));
        }
        let m_hi = self.mass.1;
        if 1.0 / m_hi < self.epsilon || self.stiffness.0 / m_hi < self.epsilon || self.damping.0 / m_hi < self.epsilon {
            return Err(Error::Config("gain ranges allow parameters below epsilon".into()));
        }
        Ok(())
    }

    /// Gain box `[lower, upper]` in flat `(m.., K.., D..)` layout around the
    /// gains of `u`. The current gains are always inside the box.
    pub fn box_around(&self, u: &ParamVector) -> (Vec<f64>, Vec<f64>) {
        let n = u.axes();
        let gains = gains_of(&u.to_flat());
        let mut lower = Vec::with_capacity(3 * n);
        let mut upper = Vec::with_capacity(3 * n);
        for (j, &v) in gains.iter().enumerate() {
            let (lo, hi) = [self.mass, self.stiffness, self.damping][j / n];
            let r = self.trust_ratio.unwrap_or(f64::INFINITY);
            lower.push((v / r).max(lo).min(v));
            upper.push((v * r).min(hi).max(v));
        }
        (lower, upper)
    }
}

/// `(m, K, D)` in flat layout from flat `u`.
fn gains_of(u: &[f64]) -> Vec<f64> {
    let n = u.len() / 3;
    (0..3 * n)
        .map(|j| {
            let m = 1.0 / u[j % n];
            if j < n {
                m
            } else {
                m * u[j]
            }
        })
        .collect()
}

/// Flat `u` from log gains `(ln m, ln K, ln D)`.
fn u_of_log_gains(g: &[f64]) -> Vec<f64> {
    let n = g.len() / 3;
    (0..3 * n)
        .map(|j| if j < n { (-g[j]).exp() } else { (g[j] - g[j % n]).exp() })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptProblem {
    pub u_init: ParamVector,
    /// Error state at the start of the window.
    pub x0: ErrorState,
    pub forces: ForceProvider,
    pub dt: f64,
    pub weights: CostWeights,
    /// Gain box in flat `(m.., K.., D..)` layout.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub epsilon: f64,
    /// Maximum number of rollouts.
    pub budget: usize,
}

impl OptProblem {
    /// Problem replaying `window` from `x0`, searching the box that
    /// `bounds` places around `u_init`.
    pub fn replay(
        u_init: ParamVector,
        x0: ErrorState,
        window: ForceWindow,
        weights: CostWeights,
        bounds: &SearchBounds,
        budget: usize,
    ) -> Self {
        let (lower, upper) = bounds.box_around(&u_init);
        Self {
            dt: window.dt(),
            u_init,
            x0,
            forces: ForceProvider::Replay(window),
            weights,
            lower,
            upper,
            epsilon: bounds.epsilon,
            budget,
        }
    }

    pub fn horizon_steps(&self) -> usize {
        self.forces.steps()
    }

    fn validate(&self) -> Result<()> {
        let n = self.u_init.axes();
        if self.x0.axes() != n {
            return Err(Error::Shape(format!(
                "x0 has {} axes, u_init has {n}",
                self.x0.axes()
            )));
        }
        if self.lower.len() != 3 * n || self.upper.len() != 3 * n {
            return Err(Error::Shape("search box length must be 3·axes".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, h)| !(*l > 0.0 && l <= h)) {
            return Err(Error::Config("search box must satisfy 0 < lower ≤ upper".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("evaluation budget must be ≥ 1".into()));
        }
        if self.horizon_steps() == 0 {
            return Err(Error::Domain("empty force window".into()));
        }
        if let ForceProvider::Replay(w) = &self.forces {
            if w.axes() != Some(n) {
                return Err(Error::Shape(format!(
                    "force window has {:?} axes, u_init has {n}",
                    w.axes()
                )));
            }
        }
        self.weights.validate()
    }
}

/// Cost of the rollout with parameters `u_init + delta_u`.
pub fn rollout_cost(problem: &OptProblem, delta_u: &[f64]) -> Result<f64> {
    problem.validate()?;
    let u = feasible_point(problem, delta_u)?;
    Ok(evaluate(problem, &u, false).0.iter().sum())
}

/// Cost and its exact gradient with respect to `u` (flat layout).
pub fn rollout_cost_and_gradient(problem: &OptProblem, delta_u: &[f64]) -> Result<(f64, Vec<f64>)> {
    problem.validate()?;
    let u = feasible_point(problem, delta_u)?;
    let (costs, grad) = evaluate(problem, &u, true);
    Ok((costs.iter().sum(), grad))
}

fn feasible_point(problem: &OptProblem, delta_u: &[f64]) -> Result<Vec<f64>> {
    let base = problem.u_init.to_flat();
    if delta_u.len() != base.len() {
        return Err(Error::Shape(format!(
            "delta_u has {} entries, expected {}",
            delta_u.len(),
            base.len()
        )));
    }
    let u: Vec<f64> = base.iter().zip(delta_u).map(|(a, b)| a + b).collect();
    for (index, &value) in u.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::Numeric("candidate parameters"));
        }
        if value < problem.epsilon {
            return Err(Error::Constraint {
                index,
                value,
                bound: problem.epsilon,
            });
        }
    }
    Ok(u)
}

/// Returns per-axis costs and `dC/du`; the gradient is empty unless
/// requested.
fn evaluate(problem: &OptProblem, u: &[f64], with_grad: bool) -> (Vec<f64>, Vec<f64>) {
    let n = problem.u_init.axes();
    let steps = problem.horizon_steps();
    let dt = problem.dt;
    let w = problem.weights.w;
    let mut costs = Vec::with_capacity(n);
    let mut grad = if with_grad { vec![0.0; 3 * n] } else { Vec::new() };

    for axis in 0..n {
        let (inv_m, k_norm, d_norm) = (u[axis], u[n + axis], u[2 * n + axis]);
        let scale = problem.weights.scale(axis);
        let (mut e, mut v) = (problem.x0.e[axis], problem.x0.e_dot[axis]);
        // Sensitivities of (e, ė) to (inv_m, k_norm, d_norm).
        let mut se = [0.0; 3];
        let mut sv = [0.0; 3];
        let mut g = [0.0; 3];
        let mut c = 0.0;
        for j in 0..=steps {
            let t = j as f64 * dt;
            let wt = t * dt * scale;
            c += wt * (w * e.abs() + (1.0 - w) * v.abs());
            if with_grad {
                let (sgn_e, sgn_v) = (sign(e), sign(v));
                for p in 0..3 {
                    g[p] += wt * (w * sgn_e * se[p] + (1.0 - w) * sgn_v * sv[p]);
                }
            }
            if j == steps {
                break;
            }
            let (f, df_de, df_dv) = match &problem.forces {
                ForceProvider::Replay(win) => (
                    win.replay(j).expect("window validated nonempty")[axis],
                    0.0,
                    0.0,
                ),
                ForceProvider::Linear { model, desired } => {
                    let (xd, vd) = &desired[j];
                    let (a, b) = (model.a[axis], model.b[axis]);
                    (a * (xd[axis] + e) + b * (vd[axis] + v) + model.c[axis], a, b)
                }
            };
            let acc = axis_accel(e, v, f, inv_m, k_norm, d_norm);
            if with_grad {
                let direct = [f, -e, -v];
                for p in 0..3 {
                    let dacc = -d_norm * sv[p] - k_norm * se[p]
                        + inv_m * (df_de * se[p] + df_dv * sv[p])
                        + direct[p];
                    sv[p] += dt * dacc;
                    se[p] += dt * sv[p];
                }
            }
            v += dt * acc;
            e += dt * v;
        }
        costs.push(c);
        if with_grad {
            for p in 0..3 {
                grad[p * n + axis] = g[p];
            }
        }
    }
    (costs, grad)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub delta_u: Vec<f64>,
    pub cost_before: f64,
    pub cost_after: f64,
    pub evaluations: usize,
    pub converged: bool,
}

impl OptResult {
    /// `u_init + δu` as a parameter vector.
    pub fn updated(&self, u_init: &ParamVector) -> Result<ParamVector> {
        let u: Vec<f64> = u_init
            .to_flat()
            .iter()
            .zip(&self.delta_u)
            .map(|(a, b)| a + b)
            .collect();
        ParamVector::from_flat(&u)
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_LOG_STEP: f64 = 2.0;
const MAX_HALVINGS: usize = 30;
/// Levels per gain of the coarse seeding grid.
const SEED_LEVELS: usize = 3;
/// Below this budget only the local search from `δu = 0` runs.
const MIN_SEEDED_BUDGET: usize = 60;

/// Rollout accounting and best point shared by the searches of one update.
struct Search<'a> {
    problem: &'a OptProblem,
    lo: Vec<f64>,
    hi: Vec<f64>,
    evaluations: usize,
    best_f: f64,
    best_u: Option<Vec<f64>>,
}

impl Search<'_> {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Per-axis costs and, if requested, the gradient in log-gain
    /// coordinates. A candidate whose `u` falls below the floor is never
    /// rolled out and costs no evaluation.
    fn eval(&mut self, z: &[f64], with_grad: bool) -> Option<(Vec<f64>, Vec<f64>)> {
        let u = u_of_log_gains(z);
        if u.iter().any(|&v| !(v >= self.problem.epsilon) || !v.is_finite()) {
            return None;
        }
        let (axis_costs, gu) = evaluate(self.problem, &u, with_grad);
        self.evaluations += 1;
        let f: f64 = axis_costs.iter().sum();
        if f.is_finite() && f < self.best_f {
            self.best_f = f;
            self.best_u = Some(u.clone());
        }
        let n = self.dim() / 3;
        let gz = if with_grad {
            (0..self.dim())
                .map(|j| {
                    if j < n {
                        -(0..3).map(|p| gu[p * n + j] * u[p * n + j]).sum::<f64>()
                    } else {
                        gu[j] * u[j]
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        Some((axis_costs, gz))
    }

    /// Projected BFGS with Armijo backtracking from `z`, stopping once
    /// `limit` rollouts have been spent in total. Returns whether it
    /// converged.
    fn local(&mut self, mut z: Vec<f64>, limit: usize) -> bool {
        let dim = self.dim();
        if self.evaluations >= limit {
            return false;
        }
        let Some((costs, mut g)) = self.eval(&z, true) else {
            return false;
        };
        let mut f: f64 = costs.iter().sum();
        let mut h = identity(dim);
        let mut h_is_identity = true;

        while self.evaluations < limit {
            let free: Vec<bool> = (0..dim)
                .map(|i| !((z[i] <= self.lo[i] && g[i] > 0.0) || (z[i] >= self.hi[i] && g[i] < 0.0)))
                .collect();
            let pg_norm = (0..dim)
                .filter(|&i| free[i])
                .map(|i| g[i].abs())
                .fold(0.0, f64::max);
            if !f.is_finite() || pg_norm <= 1e-10 * f.abs().max(1e-12) {
                return f.is_finite();
            }

            let mut d = vec![0.0; dim];
            for i in (0..dim).filter(|&i| free[i]) {
                d[i] = -(0..dim)
                    .filter(|&j| free[j])
                    .map(|j| h[i * dim + j] * g[j])
                    .sum::<f64>();
            }
            if dot(&d, &g) >= 0.0 {
                h = identity(dim);
                h_is_identity = true;
                for i in 0..dim {
                    d[i] = if free[i] { -g[i] } else { 0.0 };
                }
            }
            let d_inf = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let cap = if h_is_identity { 1.0 } else { MAX_LOG_STEP };
            if d_inf > cap {
                d.iter_mut().for_each(|v| *v *= cap / d_inf);
            }

            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                if self.evaluations >= limit {
                    break;
                }
                let z_try: Vec<f64> = (0..dim)
                    .map(|i| (z[i] + alpha * d[i]).clamp(self.lo[i], self.hi[i]))
                    .collect();
                let step: Vec<f64> = z_try.iter().zip(&z).map(|(a, b)| a - b).collect();
                if step.iter().all(|s| s.abs() < 1e-14) {
                    break;
                }
                let Some((costs, g_try)) = self.eval(&z_try, true) else {
                    alpha *= 0.5;
                    continue;
                };
                let f_try: f64 = costs.iter().sum();
                if f_try.is_finite() && f_try <= f + ARMIJO * dot(&g, &step) {
                    accepted = Some((z_try, f_try, g_try, step));
                    break;
                }
                alpha *= 0.5;
            }

            let Some((z_new, f_new, g_new, s)) = accepted else {
                if h_is_identity {
                    return self.evaluations < limit;
                }
                h = identity(dim);
                h_is_identity = true;
                continue;
            };
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * norm(&s) * norm(&y) {
                bfgs_inverse_update(&mut h, &s, &y, sy, h_is_identity);
                h_is_identity = false;
            }
            let decrease = f - f_new;
            z = z_new;
            f = f_new;
            g = g_new;
            if decrease <= 1e-12 * f.abs().max(1e-300) {
                return true;
            }
        }
        false
    }

    /// Start points assembled axis by axis from a coarse grid over the box,
    /// best first: the `r`-th start puts every axis at its `r`-th best node.
    ///
    /// The cost is a sum of independent per-axis terms, so one rollout that
    /// sets every axis to the same grid node scores that node for all axes.
    fn seeds(&mut self) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let n = dim / 3;
        let nodes = SEED_LEVELS.pow(3);
        let node_z = |search: &Search, node: usize| -> Vec<f64> {
            (0..dim)
                .map(|j| {
                    let level = (node / SEED_LEVELS.pow((j / n) as u32)) % SEED_LEVELS;
                    let t = level as f64 / (SEED_LEVELS - 1) as f64;
                    search.lo[j] + t * (search.hi[j] - search.lo[j])
                })
                .collect()
        };
        let mut scored: Vec<Vec<(f64, usize)>> = vec![Vec::with_capacity(nodes); n];
        for node in 0..nodes {
            let z = node_z(self, node);
            if let Some((costs, _)) = self.eval(&z, false) {
                for (axis, &c) in costs.iter().enumerate() {
                    if c.is_finite() {
                        scored[axis].push((c, node));
                    }
                }
            }
        }
        for s in &mut scored {
            s.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let ranks = scored.iter().map(Vec::len).min().unwrap_or(0);
        (0..ranks)
            .map(|r| {
                let mut z = vec![0.0; dim];
                for (axis, s) in scored.iter().enumerate() {
                    let zn = node_z(self, s[r].1);
                    for p in 0..3 {
                        z[p * n + axis] = zn[p * n + axis];
                    }
                }
                z
            })
            .collect()
    }
}

/// Minimizes the window cost from `δu = 0` and returns the best feasible
/// point seen.
///
/// With enough budget further local searches start from coarse-grid seeds,
/// so a poor basin around the current gains does not trap the update.
pub fn optimize_residual(problem: &OptProblem) -> Result<OptResult> {
    problem.validate()?;
    let u0 = problem.u_init.to_flat();
    if let Some((index, &value)) = u0.iter().enumerate().find(|(_, &v)| v <= problem.epsilon) {
        return Err(Error::Config(format!(
            "u_init[{index}] = {value} is not above the floor {}",
            problem.epsilon
        )));
    }
    let dim = u0.len();
    let g0 = gains_of(&u0);
    let z0: Vec<f64> = g0.iter().map(|v| v.ln()).collect();
    let mut search = Search {
        problem,
        lo: (0..dim).map(|i| problem.lower[i].min(g0[i]).ln()).collect(),
        hi: (0..dim).map(|i| problem.upper[i].max(g0[i]).ln()).collect(),
        evaluations: 0,
        best_f: f64::INFINITY,
        best_u: None,
    };
    let (costs, _) = search.eval(&z0, false).ok_or(Error::Numeric("initial parameters"))?;
    let cost_before: f64 = costs.iter().sum();
    if !cost_before.is_finite() {
        return Err(Error::Numeric("initial cost"));
    }
    search.best_u = None;

    let budget = problem.budget;
    let converged = if budget >= MIN_SEEDED_BUDGET {
        let seeds = search.seeds();
        let half = search.evaluations + (budget - search.evaluations) / 2;
        let mut converged = search.local(z0.clone(), half);
        // Budget left by searches that converge early goes to further starts.
        for z in seeds.into_iter().filter(|z| *z != z0) {
            if search.evaluations >= budget {
                break;
            }
            converged &= search.local(z, budget);
        }
        converged
    } else {
        search.local(z0, budget)
    };

    let (delta_u, cost_after) = match &search.best_u {
        Some(u) if search.best_f < cost_before => {
            (u.iter().zip(&u0).map(|(b, a)| b - a).collect(), search.best_f)
        }
        _ => (vec![0.0; dim], cost_before),
    };
    Ok(OptResult {
        delta_u,
        cost_before,
        cost_after,
        evaluations: search.evaluations,
        converged,
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ`, rescaling an identity `H` by
/// `sᵀy / yᵀy` first.
fn bfgs_inverse_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, rescale: bool) {
    let n = s.len();
    if rescale {
        let gamma = sy / dot(y, y);
        h.iter_mut().for_each(|v| *v *= gamma);
    }
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
