//! Offline phase: scripted desired trajectories, baseline gains and a
//! cross-entropy search for the initial admittance gains.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{run_episode, EpisodeSpec};
use crate::admittance::{critical_damping_vec, AdmittanceParams};
use crate::env::{
    assembly_reward_scaled, pivot_reward, planar_rotation, randomize_initial_pose, EnvConfig,
    EnvState, Geometry, Task,
};
use crate::error::{Error, Result};

/// Desired pose samples at the control period. `vel[k]` is the backward
/// difference of `pos` and `acc[k]` the forward difference of `vel`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPlan {
    pub task: Task,
    pub dt: f64,
    pub pos: Vec<Vec<f64>>,
    pub vel: Vec<Vec<f64>>,
    pub acc: Vec<Vec<f64>>,
}

impl TrajectoryPlan {
    fn from_positions(task: Task, dt: f64, pos: Vec<Vec<f64>>) -> Result<Self> {
        if pos.is_empty() {
            return Err(Error::Config("trajectory plan has no samples".into()));
        }
        let n = pos[0].len();
        let mut vel = vec![vec![0.0; n]; pos.len()];
        for k in 1..pos.len() {
            for a in 0..n {
                vel[k][a] = (pos[k][a] - pos[k - 1][a]) / dt;
            }
        }
        let mut acc = vec![vec![0.0; n]; pos.len()];
        for k in 0..pos.len() - 1 {
            for a in 0..n {
                acc[k][a] = (vel[k + 1][a] - vel[k][a]) / dt;
            }
        }
        let plan = Self {
            task,
            dt,
            pos,
            vel,
            acc,
        };
        if !plan.is_finite() {
            return Err(Error::Numeric("trajectory plan"));
        }
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn axes(&self) -> usize {
        self.pos[0].len()
    }

    pub fn duration(&self) -> f64 {
        (self.len() - 1) as f64 * self.dt
    }

    /// Desired pose and velocity at step `k`; the last pose is held at rest
    /// after the plan ends.
    pub fn sample(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        if k < self.len() {
            (self.pos[k].clone(), self.vel[k].clone())
        } else {
            (self.pos[self.len() - 1].clone(), vec![0.0; self.axes()])
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pos
            .iter()
            .chain(&self.vel)
            .chain(&self.acc)
            .flatten()
            .all(|v| v.is_finite())
    }

    /// Largest deviation of `vel` from the finite difference of `pos`.
    pub fn velocity_inconsistency(&self) -> f64 {
        (1..self.len())
            .flat_map(|k| {
                (0..self.axes())
                    .map(move |a| (self.vel[k][a] - (self.pos[k][a] - self.pos[k - 1][a]) / self.dt).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Piecewise minimum-jerk path builder.
struct PlanBuilder {
    dt: f64,
    pos: Vec<Vec<f64>>,
}

impl PlanBuilder {
    fn new(start: Vec<f64>, dt: f64) -> Self {
        Self { dt, pos: vec![start] }
    }

    fn last(&self) -> Vec<f64> {
        self.pos.last().expect("nonempty").clone()
    }

    fn steps(&self, duration: f64) -> usize {
        ((duration / self.dt).round() as usize).max(1)
    }

    fn path(&mut self, duration: f64, f: impl Fn(f64) -> Vec<f64>) {
        let n = self.steps(duration);
        for j in 1..=n {
            let s = j as f64 / n as f64;
            self.pos.push(f(s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)));
        }
    }

    fn move_to(&mut self, target: &[f64], duration: f64) {
        let from = self.last();
        self.path(duration, |s| from.iter().zip(target).map(|(a, b)| a + s * (b - a)).collect());
    }

    fn hold(&mut self, duration: f64) {
        let p = self.last();
        for _ in 0..self.steps(duration) {
            self.pos.push(p.clone());
        }
    }
}

/// Depth the assembly and pivot plans press into a contact surface, m.
pub const PRESS_DEPTH: f64 = 0.003;

/// Desired trajectory for `geometry`, starting from `start`.
///
/// * wall: approach and press `press_depth` below the surface, then hold
/// * assembly: descend next to the nominal hole, press, sweep laterally over
///   the hole uncertainty, then insert to the hole bottom
/// * pivot: approach the object's rear face, press, then push along the arc
///   that carries the face to upright
pub fn scripted_trajectory(geometry: &Geometry, start: &[f64], dt: f64) -> Result<TrajectoryPlan> {
    let task = geometry.task();
    if start.len() != task.axes() || start.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!(
            "{task} plan needs a finite {}-axis start pose",
            task.axes()
        )));
    }
    let mut b = PlanBuilder::new(start.to_vec(), dt);
    match *geometry {
        Geometry::Wall { press_depth } => {
            if !(press_depth >= 0.0) {
                return Err(Error::Config("press_depth must be ≥ 0".into()));
            }
            b.hold(0.1);
            b.move_to(&[-press_depth], 0.6);
            b.hold(5.3);
        }
        Geometry::Assembly {
            peg_width,
            clearance,
            hole_depth,
            hole_offset_range,
        } => {
            if !(clearance < peg_width && hole_depth > PRESS_DEPTH) {
                return Err(Error::Config(
                    "assembly geometry needs clearance < peg width and a hole deeper than the press depth".into(),
                ));
            }
            let sweep = hole_offset_range + 0.5 * clearance;
            b.move_to(&[-sweep, 0.002], 0.5);
            b.move_to(&[-sweep, -PRESS_DEPTH], 0.3);
            b.hold(1.2);
            b.move_to(&[sweep, -PRESS_DEPTH], 0.5);
            b.move_to(&[sweep, -hole_depth], 1.0);
            b.hold(1.0);
        }
        Geometry::Pivot {
            length, thickness, ..
        } => {
            let eta = 0.5 * thickness;
            b.move_to(&[length + 0.01, eta], 1.0);
            b.move_to(&[length - PRESS_DEPTH, eta], 0.5);
            b.hold(1.0);
            let reach = length - PRESS_DEPTH;
            let theta_end = 92f64.to_radians();
            b.path(4.0, |s| {
                let (sin, cos) = (s * theta_end).sin_cos();
                vec![reach * cos - eta * sin, reach * sin + eta * cos]
            });
            b.hold(1.0);
        }
    }
    TrajectoryPlan::from_positions(task, dt, b.pos)
}

/// Randomized per-episode conditions derived from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialConditions {
    pub pose: Vec<f64>,
    pub hole_x: f64,
    pub sensor_seed: u64,
}

impl InitialConditions {
    pub fn sample(geometry: &Geometry, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = randomize_initial_pose(geometry.task(), &mut rng);
        let hole_x = match *geometry {
            Geometry::Assembly {
                hole_offset_range, ..
            } if hole_offset_range > 0.0 => rng.random_range(-hole_offset_range..=hole_offset_range),
            _ => 0.0,
        };
        Self {
            pose,
            hole_x,
            sensor_seed: rng.random(),
        }
    }

    pub fn env_state(&self, task: Task) -> Result<EnvState> {
        let mut s = EnvState::new(task, self.pose.clone())?;
        s.hole_x = self.hole_x;
        Ok(s)
    }
}

/// Distance unit used by the assembly reward (centimetres).
pub const REWARD_UNIT_SCALE: f64 = 100.0;

/// Terminal task reward of a final environment state.
pub fn terminal_reward(cfg: &EnvConfig, state: &EnvState) -> f64 {
    match cfg.geometry {
        Geometry::Wall { press_depth } => {
            assembly_reward_scaled(&state.pose, &[-press_depth], REWARD_UNIT_SCALE)
        }
        Geometry::Assembly { hole_depth, .. } => assembly_reward_scaled(
            &state.pose,
            &[state.hole_x, -hole_depth],
            REWARD_UNIT_SCALE,
        ),
        Geometry::Pivot { .. } => {
            pivot_reward(&planar_rotation(state.pivot_angle), &planar_rotation(FRAC_PI_2))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainSearchConfig {
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Stiffness search range per axis, N/m (searched in log space).
    #[serde(default = "default_stiffness_bounds")]
    pub stiffness_bounds: (f64, f64),
    /// Virtual mass held fixed during the search, kg.
    #[serde(default = "default_mass")]
    pub mass: f64,
    /// Objective penalty per newton of peak contact force.
    #[serde(default = "default_force_penalty")]
    pub force_penalty: f64,
    /// Episode seeds every candidate is evaluated on.
    pub seeds: Vec<u64>,
    /// Seed of the sampling distribution.
    #[serde(default)]
    pub seed: u64,
}

fn default_stiffness_bounds() -> (f64, f64) {
    (10.0, 5000.0)
}

fn default_mass() -> f64 {
    1.0
}

fn default_force_penalty() -> f64 {
    0.01
}

impl Default for GainSearchConfig {
    fn default() -> Self {
        Self {
            population: 16,
            elites: 4,
            iterations: 8,
            stiffness_bounds: default_stiffness_bounds(),
            mass: default_mass(),
            force_penalty: default_force_penalty(),
            seeds: vec![0, 1, 2],
            seed: 0,
        }
    }
}

impl GainSearchConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.stiffness_bounds;
        if !(self.population >= self.elites && self.elites >= 1) {
            return Err(Error::Config("need population ≥ elites ≥ 1".into()));
        }
        if !(lo > 0.0 && lo <= hi && self.mass > 0.0) {
            return Err(Error::Config("stiffness bounds and mass must be positive".into()));
        }
        if self.seeds.is_empty() || self.iterations == 0 {
            return Err(Error::Config("need at least one seed and one iteration".into()));
        }
        if !(self.force_penalty >= 0.0) {
            return Err(Error::Config("force_penalty must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSearchResult {
    pub gains: AdmittanceParams,
    pub objective: f64,
    /// Objective of the initial sampling mean.
    pub initial_objective: f64,
    /// Best elite-mean objective per iteration, starting with the initial mean.
    pub history: Vec<f64>,
    /// Set when no evaluated candidate completed the task.
    pub all_failed: bool,
}

/// Gains for axis stiffnesses `k` with fixed mass and critical damping.
pub fn candidate_gains(mass: f64, k: &[f64]) -> Result<AdmittanceParams> {
    let m = vec![mass; k.len()];
    let d = critical_damping_vec(&m, k)?;
    AdmittanceParams::new(m, k.to_vec(), d)
}

/// Cross-entropy search over per-axis log stiffness in the nominal
/// environment `env`, without online adaptation.
pub fn cem_gain_search(cfg: &GainSearchConfig, env: &EnvConfig, dt: f64) -> Result<GainSearchResult> {
    cfg.validate()?;
    env.validate()?;
    let n = env.task().axes();
    let (lo, hi) = (cfg.stiffness_bounds.0.ln(), cfg.stiffness_bounds.1.ln());
    let evaluate = |z: &[f64]| -> Result<(f64, bool)> {
        let k: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let gains = candidate_gains(cfg.mass, &k)?;
        let mut total = 0.0;
        let mut any_success = false;
        for &seed in &cfg.seeds {
            let ic = InitialConditions::sample(&env.geometry, seed);
            let plan = scripted_trajectory(&env.geometry, &ic.pose, dt)?;
            let spec = EpisodeSpec::new(env.clone(), plan, gains.clone(), ic.env_state(env.task())?, ic.sensor_seed);
            match run_episode(&spec) {
                Ok(out) => {
                    any_success |= out.metrics.success;
                    total += terminal_reward(env, &out.final_state) - cfg.force_penalty * out.metrics.max_force;
                }
                Err(e) => {
                    log::debug!("candidate {k:?} failed: {e}");
                    total += -cfg.force_penalty * 1e3;
                }
            }
        }
        Ok((total / cfg.seeds.len() as f64, any_success))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = vec![0.5 * (lo + hi); n];
    let mut std = vec![0.25 * (hi - lo); n];
    let (initial_objective, mut any_success) = evaluate(&mean)?;
    let mut best = (mean.clone(), initial_objective);
    let mut history = vec![initial_objective];

    for _ in 0..cfg.iterations {
        let samples: Vec<Vec<f64>> = (0..cfg.population)
            .map(|_| {
                (0..n)
                    .map(|a| {
                        let z = if std[a] > 0.0 {
                            Normal::new(mean[a], std[a]).expect("finite std").sample(&mut rng)
                        } else {
                            mean[a]
                        };
                        z.clamp(lo, hi)
                    })
                    .collect()
            })
            .collect();
        let scores = samples
            .par_iter()
            .map(|z| evaluate(z))
            .collect::<Result<Vec<_>>>()?;
        any_success |= scores.iter().any(|s| s.1);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by(|&i, &j| scores[j].0.total_cmp(&scores[i].0).then(i.cmp(&j)));
        let elite = &order[..cfg.elites];
        for a in 0..n {
            let mu = elite.iter().map(|&i| samples[i][a]).sum::<f64>() / elite.len() as f64;
            let var = elite.iter().map(|&i| (samples[i][a] - mu).powi(2)).sum::<f64>() / elite.len() as f64;
            mean[a] = mu;
            std[a] = var.sqrt();
        }
        let (score, ok) = evaluate(&mean)?;
        any_success |= ok;
        if score > best.1 {
            best = (mean.clone(), score);
        }
        history.push(best.1);
    }

    if !any_success {
        log::warn!("gain search: no candidate completed the {} task", env.task());
    }
    let k: Vec<f64> = best.0.iter().map(|v| v.exp()).collect();
    Ok(GainSearchResult {
        gains: candidate_gains(cfg.mass, &k)?,
        objective: best.1,
        initial_objective,
        history,
        all_failed: !any_success,
    })
}

/// Named fixed-gain baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    DirectTransfer,
    ManualTune,
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct_transfer" => Ok(Baseline::DirectTransfer),
            "manual_tune" => Ok(Baseline::ManualTune),
            other => Err(Error::Config(format!("unknown baseline '{other}'"))),
        }
    }
}

/// Hand-tuned gains for the full 6-axis tasks: translational axes first,
/// then rotational.
pub fn manual_gains_6axis(task: Task) -> Result<AdmittanceParams> {
    match task {
        Task::Assembly => AdmittanceParams::new(
            vec![3.0, 3.0, 3.0, 2.0, 2.0, 2.0],
            vec![200.0; 6],
            vec![300.0, 300.0, 300.0, 250.0, 250.0, 250.0],
        ),
        Task::Pivot => AdmittanceParams::new(vec![4.0; 6], vec![300.0; 6], vec![300.0; 6]),
        Task::Wall => Err(Error::Config("no manual gains for the wall task".into())),
    }
}

/// Hand-tuned gains restricted to the task's translational axes. The wall
/// task reuses the assembly values.
pub fn manual_gains(task: Task) -> Result<AdmittanceParams> {
    let full = manual_gains_6axis(if task == Task::Wall { Task::Assembly } else { task })?;
    let n = task.axes();
    AdmittanceParams::new(full.m()[..n].to_vec(), full.k()[..n].to_vec(), full.d()[..n].to_vec())
}

/// Baseline gains: the hand-tuned table, or the offline search output for
/// direct transfer.
pub fn load_baseline_gains(
    name: &str,
    task: Task,
    direct: Option<&AdmittanceParams>,
) -> Result<AdmittanceParams> {
    match name.parse::<Baseline>()? {
        Baseline::ManualTune => manual_gains(task),
        Baseline::DirectTransfer => direct
            .cloned()
            .ok_or_else(|| Error::Config("direct_transfer needs offline gains".into())),
    }
}

/// Persisted offline gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainFile {
    pub task: Task,
    pub axis_labels: Vec<String>,
    pub m: Vec<f64>,
    pub k: Vec<f64>,
    pub d: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 of the configuration text the gains were produced from.
    pub config_hash: String,
    pub objective: f64,
}

impl GainFile {
    pub fn new(task: Task, gains: &AdmittanceParams, provenance: Provenance) -> Self {
        Self {
            task,
            axis_labels: task.axis_labels().iter().map(|s| s.to_string()).collect(),
            m: gains.m().to_vec(),
            k: gains.k().to_vec(),
            d: gains.d().to_vec(),
            provenance,
        }
    }

    pub fn gains(&self) -> Result<AdmittanceParams> {
        if self.m.len() != self.task.axes() {
            return Err(Error::Config(format!(
                "gain file for {} has {} axes",
                self.task,
                self.m.len()
            )));
        }
        AdmittanceParams::new(self.m.clone(), self.k.clone(), self.d.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Self = serde_json::from_str(&text)?;
        file.gains()?;
        Ok(file)
    }
}
