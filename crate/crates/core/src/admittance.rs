//! Diagonal admittance dynamics.
//!
//! The controller renders a virtual mass-spring-damper between the desired
//! trajectory `x_d` and the commanded compliant trajectory `x_c`:
//!
//! ```text
//! M (ẍ_c − ẍ_d) + D (ẋ_c − ẋ_d) + K (x_c − x_d) = F_ext
//! ```
//!
//! All matrices are diagonal, so every axis is an independent scalar system.
//! The error state `e = x_c − x_d` evolves as
//! `ë = −D′ė − K′e + M⁻¹F_ext` with `K′ = M⁻¹K` and `D′ = M⁻¹D`, which is the
//! form the residual optimizer works in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Control period used throughout the crate unless a scenario overrides it.
pub const DEFAULT_DT: f64 = 0.01;

/// `2·√(m·k)` for a single axis.
pub fn critical_damping(m: f64, k: f64) -> Result<f64> {
    if !(m.is_finite() && k.is_finite()) {
        return Err(Error::Numeric("critical_damping input"));
    }
    if m < 0.0 || k < 0.0 {
        return Err(Error::Domain(format!(
            "critical damping needs m ≥ 0 and k ≥ 0, got m={m}, k={k}"
        )));
    }
    Ok(2.0 * (m * k).sqrt())
}

/// Elementwise [`critical_damping`].
pub fn critical_damping_vec(m: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    if m.len() != k.len() {
        return Err(Error::Shape(format!(
            "inertia has {} axes, stiffness has {}",
            m.len(),
            k.len()
        )));
    }
    m.iter().zip(k).map(|(&m, &k)| critical_damping(m, k)).collect()
}

fn check_positive(name: &str, v: &[f64]) -> Result<()> {
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Numeric("admittance parameter"));
        }
        if x <= 0.0 {
            return Err(Error::Stability(format!("{name}[{i}] = {x} must be > 0")));
        }
    }
    Ok(())
}

/// Per-axis inertia, stiffness and damping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmittanceParams {
    m: Vec<f64>,
    k: Vec<f64>,
    d: Vec<f64>,
}

impl AdmittanceParams {
    pub fn new(m: Vec<f64>, k: Vec<f64>, d: Vec<f64>) -> Result<Self> {
        if m.is_empty() || m.len() != k.len() || m.len() != d.len() {
            return Err(Error::Shape(format!(
                "m/k/d lengths {}/{}/{} must be equal and nonzero",
                m.len(),
                k.len(),
                d.len()
            )));
        }
        check_positive("m", &m)?;
        check_positive("k", &k)?;
        check_positive("d", &d)?;
        Ok(Self { m, k, d })
    }

    /// Damping chosen per axis by the critical-damping rule.
    pub fn critically_damped(m: Vec<f64>, k: Vec<f64>) -> Result<Self> {
        let d = critical_damping_vec(&m, &k)?;
        Self::new(m, k, d)
    }

    /// Six-axis gains with the fixed inertia `diag(1, 1, 1, 0.1, 0.1, 0.1)`
    /// and critical damping, as used when only stiffness is learned.
    pub fn fixed_inertia_6axis(k: [f64; 6]) -> Result<Self> {
        Self::critically_damped(vec![1.0, 1.0, 1.0, 0.1, 0.1, 0.1], k.to_vec())
    }

    pub fn axes(&self) -> usize {
        self.m.len()
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Whether the axis damping exceeds `2·√(m·k)`.
    pub fn is_overdamped(&self, axis: usize) -> bool {
        self.d[axis] > 2.0 * (self.m[axis] * self.k[axis]).sqrt()
    }

    pub fn to_param_vector(&self) -> ParamVector {
        ParamVector {
            inv_m: self.m.iter().map(|m| 1.0 / m).collect(),
            k_norm: self.k.iter().zip(&self.m).map(|(k, m)| k / m).collect(),
            d_norm: self.d.iter().zip(&self.m).map(|(d, m)| d / m).collect(),
        }
    }
}

/// Optimization variable `u = [M⁻¹, M⁻¹K, M⁻¹D]` (diagonals, axis-major
/// within each block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    inv_m: Vec<f64>,
    k_norm: Vec<f64>,
    d_norm: Vec<f64>,
}

impl ParamVector {
    pub fn new(inv_m: Vec<f64>, k_norm: Vec<f64>, d_norm: Vec<f64>) -> Result<Self> {
        if inv_m.is_empty() || inv_m.len() != k_norm.len() || inv_m.len() != d_norm.len() {
            return Err(Error::Shape(format!(
                "inv_m/k_norm/d_norm lengths {}/{}/{} must be equal and nonzero",
                inv_m.len(),
                k_norm.len(),
                d_norm.len()
            )));
        }
        check_positive("inv_m", &inv_m)?;
        check_positive("k_norm", &k_norm)?;
        check_positive("d_norm", &d_norm)?;
        Ok(Self {
            inv_m,
            k_norm,
            d_norm,
        })
    }

    /// Builds from the flat layout `[inv_m.., k_norm.., d_norm..]`.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.is_empty() || flat.len() % 3 != 0 {
            return Err(Error::Shape(format!(
                "flat parameter vector length {} is not a positive multiple of 3",
                flat.len()
            )));
        }
        let n = flat.len() / 3;
        Self::new(
            flat[..n].to_vec(),
            flat[n..2 * n].to_vec(),
            flat[2 * n..].to_vec(),
        )
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.axes());
        v.extend_from_slice(&self.inv_m);
        v.extend_from_slice(&self.k_norm);
        v.extend_from_slice(&self.d_norm);
        v
    }

    pub fn axes(&self) -> usize {
        self.inv_m.len()
    }

    pub fn inv_m(&self) -> &[f64] {
        &self.inv_m
    }

    pub fn k_norm(&self) -> &[f64] {
        &self.k_norm
    }

    pub fn d_norm(&self) -> &[f64] {
        &self.d_norm
    }

    /// Gain recovery: `m = 1/inv_m`, `k = m·k_norm`, `d = m·d_norm`.
    pub fn recover_gains(&self) -> Result<AdmittanceParams> {
        check_positive("inv_m", &self.inv_m)?;
        check_positive("k_norm", &self.k_norm)?;
        check_positive("d_norm", &self.d_norm)?;
        let m: Vec<f64> = self.inv_m.iter().map(|a| 1.0 / a).collect();
        let k = m.iter().zip(&self.k_norm).map(|(m, k)| m * k).collect();
        let d = m.iter().zip(&self.d_norm).map(|(m, d)| m * d).collect();
        AdmittanceParams::new(m, k, d)
    }
}

/// Free-function form of [`AdmittanceParams::to_param_vector`].
pub fn to_param_vector(p: &AdmittanceParams) -> ParamVector {
    p.to_param_vector()
}

/// Free-function form of [`ParamVector::recover_gains`].
pub fn recover_gains(u: &ParamVector) -> Result<AdmittanceParams> {
    u.recover_gains()
}

/// Tracking error `e = x_c − x_d` and its rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorState {
    pub e: Vec<f64>,
    pub e_dot: Vec<f64>,
}

impl ErrorState {
    pub fn zeros(n: usize) -> Self {
        Self {
            e: vec![0.0; n],
            e_dot: vec![0.0; n],
        }
    }

    pub fn new(e: Vec<f64>, e_dot: Vec<f64>) -> Result<Self> {
        if e.len() != e_dot.len() {
            return Err(Error::Shape(format!(
                "e has {} axes, e_dot has {}",
                e.len(),
                e_dot.len()
            )));
        }
        Ok(Self { e, e_dot })
    }

    pub fn axes(&self) -> usize {
        self.e.len()
    }

    pub fn is_finite(&self) -> bool {
        self.e.iter().chain(&self.e_dot).all(|v| v.is_finite())
    }
}

/// Error acceleration of one axis.
#[inline]
pub(crate) fn axis_accel(e: f64, e_dot: f64, f: f64, inv_m: f64, k_norm: f64, d_norm: f64) -> f64 {
    -d_norm * e_dot - k_norm * e + inv_m * f
}

/// One semi-implicit Euler step of a single axis; returns `(e′, ė′)`.
#[inline]
pub(crate) fn axis_step(
    e: f64,
    e_dot: f64,
    f: f64,
    inv_m: f64,
    k_norm: f64,
    d_norm: f64,
    dt: f64,
) -> (f64, f64) {
    let acc = axis_accel(e, e_dot, f, inv_m, k_norm, d_norm);
    let e_dot_next = e_dot + dt * acc;
    (e + dt * e_dot_next, e_dot_next)
}

/// Advances the error state by one semi-implicit Euler step: velocity first,
/// then position with the updated velocity.
pub fn step_error_dynamics(
    x: &ErrorState,
    f_ext: &[f64],
    u: &ParamVector,
    dt: f64,
) -> Result<ErrorState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let n = u.axes();
    if x.axes() != n || f_ext.len() != n {
        return Err(Error::Shape(format!(
            "state {} / force {} / params {} axes disagree",
            x.axes(),
            f_ext.len(),
            n
        )));
    }
    if !x.is_finite() || f_ext.iter().any(|f| !f.is_finite()) {
        return Err(Error::Numeric("error dynamics input"));
    }
    let mut next = ErrorState::zeros(n);
    for i in 0..n {
        let (e, v) = axis_step(
            x.e[i],
            x.e_dot[i],
            f_ext[i],
            u.inv_m[i],
            u.k_norm[i],
            u.d_norm[i],
            dt,
        );
        next.e[i] = e;
        next.e_dot[i] = v;
    }
    Ok(next)
}

/// Position, velocity and acceleration of a multi-axis trajectory at one
/// sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicSample {
    pub pos: Vec<f64>,
    pub vel: Vec<f64>,
    pub acc: Vec<f64>,
}

impl KinematicSample {
    pub fn at_rest(pos: Vec<f64>) -> Self {
        let n = pos.len();
        Self {
            pos,
            vel: vec![0.0; n],
            acc: vec![0.0; n],
        }
    }
}

/// Integrates the admittance law along a desired trajectory.
///
/// Starts from `x_c(0) = x_d(0)`, `ẋ_c(0) = ẋ_d(0)` and applies `f_ext[k]`
/// during the step from sample `k` to `k + 1`. The returned accelerations
/// are those produced by the force at each sample.
pub fn compliant_rollout(
    desired: &[KinematicSample],
    f_ext: &[Vec<f64>],
    p: &AdmittanceParams,
    dt: f64,
) -> Result<Vec<KinematicSample>> {
    if desired.len() != f_ext.len() {
        return Err(Error::Shape(format!(
            "{} desired samples but {} force samples",
            desired.len(),
            f_ext.len()
        )));
    }
    let u = p.to_param_vector();
    let n = p.axes();
    let mut x = ErrorState::zeros(n);
    let mut out = Vec::with_capacity(desired.len());
    for (xd, f) in desired.iter().zip(f_ext) {
        if xd.pos.len() != n || f.len() != n {
            return Err(Error::Shape(format!(
                "sample has {} axes / force {} axes, params have {n}",
                xd.pos.len(),
                f.len()
            )));
        }
        let acc: Vec<f64> = (0..n)
            .map(|i| {
                xd.acc[i]
                    + axis_accel(x.e[i], x.e_dot[i], f[i], u.inv_m[i], u.k_norm[i], u.d_norm[i])
            })
            .collect();
        out.push(KinematicSample {
            pos: (0..n).map(|i| xd.pos[i] + x.e[i]).collect(),
            vel: (0..n).map(|i| xd.vel[i] + x.e_dot[i]).collect(),
            acc,
        });
        x = step_error_dynamics(&x, f, &u, dt)?;
    }
    Ok(out)
}
