//! Closed-loop episodes with periodic residual gain updates.

use std::io::Write;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::admittance::{step_error_dynamics, AdmittanceParams, ErrorState, ParamVector};
use crate::cost::CostWeights;
use crate::env::{success_check, task_satisfied, EnvConfig, EnvState, EpisodeMetrics, MetricsAccumulator, Sensor};
use crate::error::{Error, Result};
use crate::force_window::{fit_linear_force, ForceWindow};
use crate::offline::TrajectoryPlan;
use crate::optimizer::{optimize_residual, ForceProvider, OptProblem, OptResult, SearchBounds};

/// Force model used inside optimization rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForceSource {
    #[default]
    RecordReplay,
    LinearFit,
}

/// How optimizer runs are scheduled relative to the control loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UpdateMode {
    /// Control pauses while the optimizer runs.
    #[default]
    Interleaved,
    /// The optimizer runs on a worker thread; its result is applied
    /// `apply_delay_steps` control steps after the snapshot was taken.
    Background { apply_delay_steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    /// Update period, s.
    pub t_update: f64,
    pub w: f64,
    #[serde(default)]
    pub axis_scale: Option<Vec<f64>>,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub bounds: Option<SearchBounds>,
    #[serde(default)]
    pub force_source: ForceSource,
    #[serde(default)]
    pub mode: UpdateMode,
}

fn default_budget() -> usize {
    200
}

impl AdaptationConfig {
    pub fn new(t_update: f64, w: f64) -> Self {
        Self {
            t_update,
            w,
            axis_scale: None,
            budget: default_budget(),
            bounds: None,
            force_source: ForceSource::RecordReplay,
            mode: UpdateMode::Interleaved,
        }
    }

    pub fn weights(&self) -> Result<CostWeights> {
        let mut w = CostWeights::new(self.w, self.t_update)?;
        w.axis_scale = self.axis_scale.clone();
        w.validate()?;
        Ok(w)
    }

    pub fn search_bounds(&self) -> SearchBounds {
        self.bounds.clone().unwrap_or_default()
    }

    /// Control steps per update.
    pub fn period_steps(&self, dt: f64) -> usize {
        ((self.t_update / dt).round() as usize).max(1)
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        if !(self.t_update > 0.0) {
            return Err(Error::Config("t_update must be > 0".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be ≥ 1".into()));
        }
        if let UpdateMode::Background { apply_delay_steps } = self.mode {
            if apply_delay_steps >= self.period_steps(dt) {
                return Err(Error::Config("apply_delay_steps must be shorter than the update period".into()));
            }
        }
        self.search_bounds().validate()?;
        self.weights().map(|_| ())
    }
}

/// Everything needed to run one episode.
#[derive(Debug, Clone)]
pub struct EpisodeSpec {
    pub env: EnvConfig,
    pub plan: TrajectoryPlan,
    pub gains: AdmittanceParams,
    pub initial_state: EnvState,
    pub sensor_seed: u64,
    /// `None` runs with fixed gains.
    pub adaptation: Option<AdaptationConfig>,
    /// Episode length, s; defaults to the plan duration.
    pub duration: f64,
}

impl EpisodeSpec {
    pub fn new(
        env: EnvConfig,
        plan: TrajectoryPlan,
        gains: AdmittanceParams,
        initial_state: EnvState,
        sensor_seed: u64,
    ) -> Self {
        Self {
            duration: plan.duration(),
            env,
            plan,
            gains,
            initial_state,
            sensor_seed,
            adaptation: None,
        }
    }

    pub fn with_adaptation(mut self, adaptation: AdaptationConfig) -> Self {
        self.adaptation = Some(adaptation);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub desired: Vec<f64>,
    pub compliant: Vec<f64>,
    pub raw_force: Vec<f64>,
    pub measured_force: Vec<f64>,
    pub m: Vec<f64>,
    pub k: Vec<f64>,
    pub d: Vec<f64>,
    pub cumulative_cost: f64,
    pub contact: bool,
}

/// Optimizer telemetry for one gain update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    /// Time the window snapshot was taken, s.
    pub t: f64,
    /// Time the new gains took effect, s.
    pub applied_at: f64,
    pub result: Option<OptResult>,
    /// Set when the optimizer failed and the previous gains were kept.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EpisodeTrace {
    pub axes: usize,
    pub rows: Vec<TraceRow>,
    pub updates: Vec<UpdateRecord>,
}

impl EpisodeTrace {
    /// Contact-to-free transitions in rows stamped after `t0`.
    pub fn separations_after(&self, t0: f64) -> usize {
        self.rows
            .windows(2)
            .filter(|w| w[1].t > t0 && w[0].contact && !w[1].contact)
            .count()
    }

    /// Largest raw-force norm over rows stamped in `(t0, t1]`.
    pub fn peak_force(&self, t0: f64, t1: f64) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.t > t0 && r.t <= t1)
            .map(|r| norm(&r.raw_force))
            .fold(0.0, f64::max)
    }

    /// Strict local maxima of the raw-force norm above `threshold` over rows
    /// stamped in `(t0, t1]`.
    pub fn force_peaks(&self, threshold: f64, t0: f64, t1: f64) -> usize {
        let f: Vec<(f64, f64)> = self.rows.iter().map(|r| (r.t, norm(&r.raw_force))).collect();
        f.windows(3)
            .filter(|w| w[1].0 > t0 && w[1].0 <= t1 && w[1].1 > threshold && w[1].1 > w[0].1 && w[1].1 >= w[2].1)
            .count()
    }

    /// Time of the first applied gain update.
    pub fn first_update(&self) -> Option<f64> {
        self.updates.iter().find(|u| u.error.is_none()).map(|u| u.applied_at)
    }

    pub fn measured_forces(&self, axis: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.measured_force[axis]).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.axes;
        let mut header = vec!["t".to_string()];
        for group in ["desired", "compliant", "raw_force", "measured_force", "m", "k", "d"] {
            header.extend((0..n).map(|a| format!("{group}_{a}")));
        }
        header.push("cumulative_cost".into());
        header.push("contact".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.t.to_string()];
            for group in [&r.desired, &r.compliant, &r.raw_force, &r.measured_force, &r.m, &r.k, &r.d] {
                rec.extend(group.iter().map(|v| v.to_string()));
            }
            rec.push(r.cumulative_cost.to_string());
            rec.push(u8::from(r.contact).to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("trace", e))?;
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub metrics: EpisodeMetrics,
    pub trace: EpisodeTrace,
    pub final_state: EnvState,
    pub final_gains: AdmittanceParams,
}

/// Runs one episode: at each control step the measured force drives the
/// error dynamics, the compliant pose `x_d + e` is commanded, and the
/// environment returns the next contact force. With adaptation enabled,
/// every `t_update` seconds the last window of measured forces is replayed
/// to optimize a residual on the current parameters, and the recovered
/// gains replace the current ones between control steps.
pub fn run_episode(spec: &EpisodeSpec) -> Result<EpisodeOutcome> {
    match spec.adaptation.as_ref().map(|a| a.mode) {
        Some(UpdateMode::Background { apply_delay_steps }) => std::thread::scope(|scope| {
            let (job_tx, job_rx) = mpsc::channel::<OptProblem>();
            let (res_tx, res_rx) = mpsc::channel::<Result<OptResult>>();
            scope.spawn(move || {
                for job in job_rx {
                    if res_tx.send(optimize_residual(&job)).is_err() {
                        break;
                    }
                }
            });
            let mut solver = BackgroundSolver {
                jobs: job_tx,
                results: res_rx,
                delay: apply_delay_steps,
            };
            run_loop(spec, &mut solver)
        }),
        _ => run_loop(spec, &mut InlineSolver),
    }
}

trait Solver {
    /// Steps between snapshot and application.
    fn delay(&self) -> usize;
    fn submit(&mut self, problem: OptProblem) -> Result<()>;
    fn collect(&mut self, problem: &OptProblem) -> Result<OptResult>;
}

struct InlineSolver;

impl Solver for InlineSolver {
    fn delay(&self) -> usize {
        0
    }
    fn submit(&mut self, _: OptProblem) -> Result<()> {
        Ok(())
    }
    fn collect(&mut self, problem: &OptProblem) -> Result<OptResult> {
        optimize_residual(problem)
    }
}

struct BackgroundSolver {
    jobs: mpsc::Sender<OptProblem>,
    results: mpsc::Receiver<Result<OptResult>>,
    delay: usize,
}

impl Solver for BackgroundSolver {
    fn delay(&self) -> usize {
        self.delay
    }
    fn submit(&mut self, problem: OptProblem) -> Result<()> {
        self.jobs
            .send(problem)
            .map_err(|_| Error::Config("optimizer worker stopped".into()))
    }
    fn collect(&mut self, _: &OptProblem) -> Result<OptResult> {
        self.results
            .recv()
            .map_err(|_| Error::Config("optimizer worker stopped".into()))?
    }
}

struct Pending {
    problem: OptProblem,
    t: f64,
    apply_step: usize,
}

fn run_loop(spec: &EpisodeSpec, solver: &mut dyn Solver) -> Result<EpisodeOutcome> {
    let env = &spec.env;
    env.validate()?;
    let dt = spec.plan.dt;
    let n = spec.plan.axes();
    if spec.gains.axes() != n || spec.initial_state.pose.len() != n || env.task().axes() != n {
        return Err(Error::Shape(format!(
            "plan has {n} axes; gains {}, state {}, task {}",
            spec.gains.axes(),
            spec.initial_state.pose.len(),
            env.task().axes()
        )));
    }
    let adapt = match &spec.adaptation {
        Some(a) => {
            a.validate(dt)?;
            Some((a, a.weights()?, a.search_bounds(), a.period_steps(dt)))
        }
        None => None,
    };
    let trace_weights = match &adapt {
        Some((_, w, _, _)) => w.clone(),
        None => CostWeights::new(0.5, 1.0)?,
    };

    let steps = (spec.duration / dt).round() as usize;
    let period = adapt.as_ref().map_or(usize::MAX, |a| a.3);
    let mut window = ForceWindow::new(period.min(steps.max(1)), dt)?;
    let mut sensor = Sensor::new(env, spec.sensor_seed);
    let mut state = spec.initial_state.clone();
    let mut raw = vec![0.0; n];
    let mut err = ErrorState::zeros(n);
    let mut u = spec.gains.to_param_vector();
    let mut gains = spec.gains.clone();
    let mut err_hist: Vec<ErrorState> = Vec::with_capacity(steps);
    let mut pose_hist: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(steps);
    let mut metrics = MetricsAccumulator::default();
    let mut trace = EpisodeTrace {
        axes: n,
        ..Default::default()
    };
    let mut cum_cost = 0.0;
    let mut pending: Option<Pending> = None;

    for k in 0..steps {
        let t = k as f64 * dt;
        if let Some((cfg, weights, bounds, period)) = &adapt {
            if let Some(p) = pending.take_if(|p| p.apply_step == k) {
                trace.updates.push(finish_update(solver, &p, t, &mut u, &mut gains));
            }
            if k > 0 && k % period == 0 && k >= window.len() && pending.is_none() {
                let problem = build_problem(
                    cfg,
                    weights,
                    bounds,
                    &window,
                    &u,
                    &err_hist,
                    &pose_hist,
                    &err,
                    spec,
                    k,
                )?;
                solver.submit(problem.clone())?;
                let p = Pending {
                    problem,
                    t,
                    apply_step: k + solver.delay(),
                };
                if p.apply_step == k {
                    trace.updates.push(finish_update(solver, &p, t, &mut u, &mut gains));
                } else {
                    pending = Some(p);
                }
            }
        }

        let measured = sensor.read(&raw);
        window.record(t, &measured)?;
        err_hist.push(err.clone());
        pose_hist.push((state.pose.clone(), state.vel.clone()));
        err = step_error_dynamics(&err, &measured, &u, dt)?;

        let (xd, vd) = spec.plan.sample(k + 1);
        let cmd: Vec<f64> = xd.iter().zip(&err.e).map(|(a, b)| a + b).collect();
        let cmd_vel: Vec<f64> = vd.iter().zip(&err.e_dot).map(|(a, b)| a + b).collect();
        let (next, f) = crate::env::env_step(&state, env, &cmd, &cmd_vel, dt)?;
        state = next;
        raw = f;

        let t_next = (k + 1) as f64 * dt;
        metrics.observe(t_next, &raw, task_satisfied(env, &state));
        cum_cost += (0..n)
            .map(|a| {
                trace_weights.scale(a)
                    * (trace_weights.w * err.e[a].abs() + (1.0 - trace_weights.w) * err.e_dot[a].abs())
            })
            .sum::<f64>()
            * t_next
            * dt;
        trace.rows.push(TraceRow {
            t: t_next,
            desired: xd,
            compliant: cmd,
            raw_force: raw.clone(),
            measured_force: measured,
            m: gains.m().to_vec(),
            k: gains.k().to_vec(),
            d: gains.d().to_vec(),
            cumulative_cost: cum_cost,
            contact: state.in_contact(),
        });
    }

    Ok(EpisodeOutcome {
        metrics: success_check(env, &state, &metrics)?,
        trace,
        final_state: state,
        final_gains: gains,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_problem(
    cfg: &AdaptationConfig,
    weights: &CostWeights,
    bounds: &SearchBounds,
    window: &ForceWindow,
    u: &ParamVector,
    err_hist: &[ErrorState],
    pose_hist: &[(Vec<f64>, Vec<f64>)],
    err: &ErrorState,
    spec: &EpisodeSpec,
    k: usize,
) -> Result<OptProblem> {
    let len = window.len();
    let mut problem = OptProblem::replay(
        u.clone(),
        err_hist[k - len].clone(),
        window.clone(),
        weights.clone(),
        bounds,
        cfg.budget,
    );
    if cfg.force_source == ForceSource::LinearFit {
        let fit = fit_linear_force(window, &pose_hist[k - len..k])?;
        problem.x0 = err.clone();
        problem.forces = ForceProvider::Linear {
            model: fit.model,
            desired: (k..k + len).map(|j| spec.plan.sample(j)).collect(),
        };
    }
    Ok(problem)
}

/// Collects the optimizer result for `p` and swaps in the new gains, or
/// keeps the current ones if anything fails.
fn finish_update(
    solver: &mut dyn Solver,
    p: &Pending,
    applied_at: f64,
    u: &mut ParamVector,
    gains: &mut AdmittanceParams,
) -> UpdateRecord {
    let t = p.t;
    let outcome = solver.collect(&p.problem).and_then(|r| {
        let next = r.updated(&p.problem.u_init)?;
        let g = next.recover_gains()?;
        Ok((r, next, g))
    });
    match outcome {
        Ok((r, next, g)) => {
            debug_assert!(r.cost_after <= r.cost_before);
            *u = next;
            *gains = g;
            UpdateRecord {
                t,
                applied_at,
                result: Some(r),
                error: None,
            }
        }
        Err(e) => {
            log::warn!("gain update at t={t:.2}s failed, keeping previous gains: {e}");
            UpdateRecord {
                t,
                applied_at,
                result: None,
                error: Some(e.to_string()),
            }
        }
    }
}
