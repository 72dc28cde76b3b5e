//! Time-weighted smoothness / completion objective.
//!
//! `C = ∫₀ᵀ t·[w·|e(t)| + (1−w)·|ė(t)|] dt`, discretized as a left Riemann
//! sum with `t_k = k·dt`. Multi-axis magnitudes are per-axis absolute values
//! summed, optionally scaled per axis.

use serde::{Deserialize, Serialize};

use crate::admittance::ErrorState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// Weight on position error; `1 − w` goes to velocity error.
    pub w: f64,
    /// Horizon of the objective in seconds.
    pub horizon: f64,
    /// Optional per-axis scale applied to both error terms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_scale: Option<Vec<f64>>,
}

impl CostWeights {
    pub fn new(w: f64, horizon: f64) -> Result<Self> {
        let c = Self {
            w,
            horizon,
            axis_scale: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::Domain(format!("w = {} outside [0, 1]", self.w)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Domain(format!(
                "horizon = {} must be positive",
                self.horizon
            )));
        }
        if let Some(s) = &self.axis_scale {
            if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Domain("axis_scale entries must be ≥ 0".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn scale(&self, axis: usize) -> f64 {
        self.axis_scale
            .as_ref()
            .and_then(|s| s.get(axis).copied())
            .unwrap_or(1.0)
    }
}

/// `(Σ t_k ‖e_k‖₁ dt, Σ t_k ‖ė_k‖₁ dt)`; the ITAE and FITAVE sums.
fn components(states: &[ErrorState], dt: f64, weights: Option<&CostWeights>) -> Result<(f64, f64)> {
    if states.is_empty() {
        return Err(Error::Domain("cost of an empty trajectory".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let mut pos = 0.0;
    let mut vel = 0.0;
    for (k, x) in states.iter().enumerate() {
        let t = k as f64 * dt;
        let mut pe = 0.0;
        let mut ve = 0.0;
        for i in 0..x.axes() {
            let s = weights.map_or(1.0, |w| w.scale(i));
            pe += s * x.e[i].abs();
            ve += s * x.e_dot[i].abs();
        }
        pos += t * pe * dt;
        vel += t * ve * dt;
    }
    Ok((pos, vel))
}

pub fn trajectory_cost(states: &[ErrorState], dt: f64, weights: &CostWeights) -> Result<f64> {
    weights.validate()?;
    let (pos, vel) = components(states, dt, Some(weights))?;
    Ok(weights.w * pos + (1.0 - weights.w) * vel)
}

/// Integral of time-weighted absolute position error over the samples.
pub fn itae(states: &[ErrorState], dt: f64) -> Result<f64> {
    components(states, dt, None).map(|c| c.0)
}

/// Finite-horizon integral of time-weighted absolute velocity error.
pub fn fitave(states: &[ErrorState], dt: f64) -> Result<f64> {
    components(states, dt, None).map(|c| c.1)
}
