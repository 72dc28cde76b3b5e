//! Recording and replaying external force measurements.
//!
//! The optimizer never models contact explicitly. It re-simulates the last
//! window with the forces exactly as they were measured. A linear
//! spring-damper force fit is provided as the comparison baseline.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::{Arc, Mutex};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceSample {
    pub t: f64,
    pub f: Vec<f64>,
}

/// Bounded buffer of timestamped force vectors; the oldest sample is evicted
/// when full.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceWindow {
    samples: VecDeque<ForceSample>,
    capacity: usize,
    dt: f64,
}

impl ForceWindow {
    pub fn new(capacity: usize, dt: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Domain("window capacity must be ≥ 1".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        Ok(Self {
            samples: VecDeque::with_capacity(capacity),
            capacity,
            dt,
        })
    }

    /// Capacity of one adaptation period, `round(period / dt)` samples.
    pub fn for_period(period: f64, dt: f64) -> Result<Self> {
        Self::new((period / dt).round().max(1.0) as usize, dt)
    }

    pub fn record(&mut self, t: f64, f: &[f64]) -> Result<()> {
        if f.iter().any(|v| !v.is_finite()) || !t.is_finite() {
            return Err(Error::Numeric("recorded force"));
        }
        if let Some(last) = self.samples.back() {
            if t <= last.t {
                return Err(Error::Ordering { t, last: last.t });
            }
            if f.len() != last.f.len() {
                return Err(Error::Shape(format!(
                    "force has {} axes, window holds {}",
                    f.len(),
                    last.f.len()
                )));
            }
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(ForceSample { t, f: f.to_vec() });
        Ok(())
    }

    /// The `k`-th recorded force, holding the last sample for `k` past the end.
    pub fn replay(&self, k: usize) -> Result<&[f64]> {
        let last = self
            .samples
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Domain("replay from an empty force window".into()))?;
        Ok(&self.samples[k.min(last)].f)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn axes(&self) -> Option<usize> {
        self.samples.front().map(|s| s.f.len())
    }

    pub fn samples(&self) -> impl Iterator<Item = &ForceSample> {
        self.samples.iter()
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    /// Writes `t,f_axis0,…` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.axes().unwrap_or(0);
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("f_axis{i}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.t.to_string()];
            row.extend(s.f.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Window shared between the control loop (writer) and the optimizer, which
/// only ever sees an immutable snapshot.
#[derive(Debug, Clone)]
pub struct SharedForceWindow(Arc<Mutex<ForceWindow>>);

impl SharedForceWindow {
    pub fn new(window: ForceWindow) -> Self {
        Self(Arc::new(Mutex::new(window)))
    }

    pub fn record(&self, t: f64, f: &[f64]) -> Result<()> {
        self.0.lock().expect("force window lock poisoned").record(t, f)
    }

    pub fn snapshot(&self) -> ForceWindow {
        self.0.lock().expect("force window lock poisoned").clone()
    }
}

/// Per-axis `F = a·x + b·ẋ + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearForceModel {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl LinearForceModel {
    pub fn predict(&self, x: &[f64], x_dot: &[f64]) -> Vec<f64> {
        (0..self.a.len())
            .map(|i| self.a[i] * x[i] + self.b[i] * x_dot[i] + self.c[i])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(&self.b).chain(&self.c).all(|v| v.is_finite())
    }
}

pub fn predict_linear_force(model: &LinearForceModel, x: &[f64], x_dot: &[f64]) -> Vec<f64> {
    model.predict(x, x_dot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub model: LinearForceModel,
    /// Residual sum of squares per axis.
    pub residual: Vec<f64>,
    /// Set when the regressors were rank deficient and the ridge fallback was
    /// used for at least one axis.
    pub degenerate: bool,
}

/// Ridge added to the column-normalized normal equations when they are
/// singular.
const RIDGE: f64 = 1e-8;

/// Ordinary least squares per axis over the window, with matching tool
/// pose/velocity samples.
pub fn fit_linear_force(window: &ForceWindow, states: &[(Vec<f64>, Vec<f64>)]) -> Result<LinearFit> {
    let forces: Vec<&[f64]> = window.samples().map(|s| s.f.as_slice()).collect();
    fit_linear_force_slices(&forces, states)
}

pub(crate) fn fit_linear_force_slices(
    forces: &[&[f64]],
    states: &[(Vec<f64>, Vec<f64>)],
) -> Result<LinearFit> {
    if forces.len() != states.len() {
        return Err(Error::Shape(format!(
            "{} force samples but {} state samples",
            forces.len(),
            states.len()
        )));
    }
    if forces.len() < 3 {
        return Err(Error::Underdetermined(forces.len()));
    }
    let n = forces[0].len();
    let mut model = LinearForceModel {
        a: vec![0.0; n],
        b: vec![0.0; n],
        c: vec![0.0; n],
    };
    let mut residual = vec![0.0; n];
    let mut degenerate = false;
    for axis in 0..n {
        let rows: Vec<([f64; 3], f64)> = forces
            .iter()
            .zip(states)
            .map(|(f, (x, v))| ([x[axis], v[axis], 1.0], f[axis]))
            .collect();
        let (coef, ridge_used) = solve_normal_equations(&rows);
        degenerate |= ridge_used;
        model.a[axis] = coef[0];
        model.b[axis] = coef[1];
        model.c[axis] = coef[2];
        residual[axis] = rows
            .iter()
            .map(|(r, y)| {
                let p = coef[0] * r[0] + coef[1] * r[1] + coef[2] * r[2];
                (y - p).powi(2)
            })
            .sum();
    }
    Ok(LinearFit {
        model,
        residual,
        degenerate,
    })
}

fn solve_normal_equations(rows: &[([f64; 3], f64)]) -> ([f64; 3], bool) {
    // Column scaling keeps millimetre positions and newton offsets comparable.
    let mut scale = [0.0f64; 3];
    for (r, _) in rows {
        for j in 0..3 {
            scale[j] += r[j] * r[j];
        }
    }
    let scale = scale.map(|s| if s > 0.0 { s.sqrt() } else { 1.0 });

    let mut ata = Matrix3::<f64>::zeros();
    let mut aty = Vector3::<f64>::zeros();
    for (r, y) in rows {
        let v = Vector3::new(r[0] / scale[0], r[1] / scale[1], r[2] / scale[2]);
        ata += v * v.transpose();
        aty += v * *y;
    }

    let min_eig = ata.symmetric_eigenvalues().min();
    let singular = !(min_eig > 1e-12);
    if singular {
        ata += Matrix3::identity() * RIDGE;
    }
    let sol = ata
        .cholesky()
        .map(|c| c.solve(&aty))
        .unwrap_or_else(Vector3::zeros);
    (
        [sol[0] / scale[0], sol[1] / scale[1], sol[2] / scale[2]],
        singular,
    )
}

/// In-window versus next-window error of a linear fit on consecutive windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitGeneralization {
    pub windows: usize,
    /// Mean absolute error of each fit on its own window.
    pub in_window_mae: f64,
    /// Mean absolute error of each fit on the following window.
    pub next_window_mae: f64,
    /// Mean absolute error of each fit on the following window's samples
    /// whose magnitude is at least half that window's peak.
    pub next_window_peak_mae: f64,
}

/// Fits on every `window_len` block of `axis` that contains contact force and
/// evaluates the fit on the block that follows it.
pub fn linear_fit_generalization(
    forces: &[Vec<f64>],
    states: &[(Vec<f64>, Vec<f64>)],
    window_len: usize,
    axis: usize,
) -> Result<FitGeneralization> {
    if forces.len() != states.len() {
        return Err(Error::Shape(format!(
            "{} force samples but {} state samples",
            forces.len(),
            states.len()
        )));
    }
    if window_len < 3 {
        return Err(Error::Underdetermined(window_len));
    }
    let mut in_sum = 0.0;
    let mut next_sum = 0.0;
    let mut peak_sum = 0.0;
    let mut windows = 0;
    let mut start = 0;
    while start + 2 * window_len <= forces.len() {
        let fit_range = start..start + window_len;
        let next_range = start + window_len..start + 2 * window_len;
        start += window_len;
        if forces[fit_range.clone()].iter().all(|f| f[axis] == 0.0) {
            continue;
        }
        let f_slices: Vec<&[f64]> = forces[fit_range.clone()].iter().map(|f| f.as_slice()).collect();
        let fit = fit_linear_force_slices(&f_slices, &states[fit_range.clone()])?;
        let err = |k: usize| {
            let (x, v) = &states[k];
            (fit.model.predict(x, v)[axis] - forces[k][axis]).abs()
        };
        in_sum += fit_range.clone().map(err).sum::<f64>() / window_len as f64;
        next_sum += next_range.clone().map(err).sum::<f64>() / window_len as f64;
        let peak = next_range
            .clone()
            .map(|k| forces[k][axis].abs())
            .fold(0.0, f64::max);
        let peak_idx: Vec<usize> = next_range
            .filter(|&k| forces[k][axis].abs() >= 0.5 * peak)
            .collect();
        peak_sum += peak_idx.iter().map(|&k| err(k)).sum::<f64>() / peak_idx.len() as f64;
        windows += 1;
    }
    if windows == 0 {
        return Err(Error::Domain("no window with contact force to fit".into()));
    }
    let w = windows as f64;
    Ok(FitGeneralization {
        windows,
        in_window_mae: in_sum / w,
        next_window_mae: next_sum / w,
        next_window_peak_mae: peak_sum / w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_appends_and_evicts() {
        let mut w = ForceWindow::new(3, 0.01).unwrap();
        w.record(0.0, &[5.0]).unwrap();
        assert_eq!(w.len(), 1);
        for (i, t) in [0.01, 0.02, 0.03].iter().enumerate() {
            w.record(*t, &[i as f64]).unwrap();
        }
        assert_eq!(w.len(), 3);
        assert_eq!(w.samples().next().unwrap().t, 0.01);
    }

    #[test]
    fn record_rejects_repeated_timestamp() {
        let mut w = ForceWindow::new(4, 0.01).unwrap();
        w.record(1.0, &[1.0]).unwrap();
        assert!(matches!(w.record(1.0, &[1.0]), Err(Error::Ordering { .. })));
        assert!(matches!(w.record(2.0, &[f64::NAN]), Err(Error::Numeric(_))));
    }

    #[test]
    fn replay_holds_last() {
        let mut w = ForceWindow::new(8, 0.01).unwrap();
        assert!(matches!(w.replay(0), Err(Error::Domain(_))));
        for (k, f) in [1.0, 2.0, 3.0].iter().enumerate() {
            w.record(k as f64 * 0.01, &[*f]).unwrap();
        }
        assert_eq!(w.replay(1).unwrap(), &[2.0]);
        assert_eq!(w.replay(3 + 5).unwrap(), &[3.0]);
    }

    #[test]
    fn csv_export() {
        let mut w = ForceWindow::new(4, 0.5).unwrap();
        w.record(0.0, &[1.0, -2.0]).unwrap();
        w.record(0.5, &[0.25, 3.0]).unwrap();
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t,f_axis0,f_axis1\n0,1,-2\n0.5,0.25,3\n"
        );
    }

    #[test]
    fn shared_window_snapshot_is_detached() {
        let shared = SharedForceWindow::new(ForceWindow::new(4, 0.01).unwrap());
        shared.record(0.0, &[1.0]).unwrap();
        let snap = shared.snapshot();
        shared.record(0.01, &[2.0]).unwrap();
        assert_eq!(snap.len(), 1);
        assert_eq!(shared.snapshot().len(), 2);
    }

    fn synthetic(n: usize, f: impl Fn(f64, f64) -> f64) -> (ForceWindow, Vec<(Vec<f64>, Vec<f64>)>) {
        let mut w = ForceWindow::new(n, 0.01).unwrap();
        let mut states = Vec::new();
        for k in 0..n {
            let t = k as f64 * 0.01;
            let x = 0.01 * (3.0 * t).sin() + 0.002 * t;
            let v = 0.03 * (3.0 * t).cos() + 0.002 + 0.01 * (7.0 * t).sin();
            w.record(t, &[f(x, v)]).unwrap();
            states.push((vec![x], vec![v]));
        }
        (w, states)
    }

    #[test]
    fn exact_model_recovered() {
        let (w, s) = synthetic(100, |x, v| -100.0 * x - 5.0 * v + 2.0);
        let fit = fit_linear_force(&w, &s).unwrap();
        assert!((fit.model.a[0] + 100.0).abs() < 1e-8);
        assert!((fit.model.b[0] + 5.0).abs() < 1e-8);
        assert!((fit.model.c[0] - 2.0).abs() < 1e-8);
        assert!(!fit.degenerate);
    }

    #[test]
    fn constant_force_fit() {
        let (w, s) = synthetic(50, |_, _| 7.0);
        let fit = fit_linear_force(&w, &s).unwrap();
        assert!(fit.model.a[0].abs() < 1e-6);
        assert!(fit.model.b[0].abs() < 1e-6);
        assert!((fit.model.c[0] - 7.0).abs() < 1e-9);
        assert!(fit.residual[0] < 1e-10);
    }

    #[test]
    fn two_samples_underdetermined() {
        let (w, s) = synthetic(2, |_, _| 1.0);
        assert!(matches!(fit_linear_force(&w, &s), Err(Error::Underdetermined(2))));
    }

    #[test]
    fn rank_deficient_uses_fallback() {
        let mut w = ForceWindow::new(10, 0.01).unwrap();
        let mut s = Vec::new();
        for k in 0..10 {
            w.record(k as f64 * 0.01, &[3.0]).unwrap();
            s.push((vec![0.0], vec![0.0]));
        }
        let fit = fit_linear_force(&w, &s).unwrap();
        assert!(fit.degenerate);
        assert!(fit.model.is_finite());
        assert!((fit.model.c[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn prediction_examples() {
        let m = LinearForceModel {
            a: vec![0.0],
            b: vec![0.0],
            c: vec![7.0],
        };
        assert_eq!(predict_linear_force(&m, &[0.3], &[-2.0]), vec![7.0]);
        let m = LinearForceModel {
            a: vec![-100.0],
            b: vec![0.0],
            c: vec![0.0],
        };
        assert_eq!(predict_linear_force(&m, &[0.01], &[0.0]), vec![-1.0]);
    }

    #[test]
    fn own_window_residual_bounded_by_fit_residual() {
        let (w, s) = synthetic(80, |x, v| -300.0 * x + 2.0 * v * v + (x * 40.0).cos());
        let fit = fit_linear_force(&w, &s).unwrap();
        let sse: f64 = w
            .samples()
            .zip(&s)
            .map(|(f, (x, v))| (fit.model.predict(x, v)[0] - f.f[0]).powi(2))
            .sum();
        assert!(sse <= fit.residual[0] * (1.0 + 1e-9));
    }
}
