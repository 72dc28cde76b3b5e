//! Synthetic penalty-contact environments.
//!
//! The robot is assumed to track the compliant command perfectly, so the
//! tool pose *is* `x_c`. Each environment maps the commanded pose and
//! velocity to a contact force on the tool:
//!
//! * `wall`: 1-D, a flat surface at `z = 0` approached from above.
//! * `assembly`: 2-D peg-in-hole in the `(x, z)` plane. The peg drops into
//!   the hole only when its centre is within half the clearance of the hole
//!   axis; elsewhere it rests on the surface.
//! * `pivot`: 2-D, a flat object lying against a wall at `x = 0`. The finger
//!   pushes the object's rear face; the object rotates about its bottom edge
//!   at the wall.
//!
//! Normal forces follow `k_env·δ + d_env·max(0, δ̇)` for penetration `δ`.
//! Tangential forces never exceed `μ·f_n`. The peg uses elastic-plastic
//! friction: each contact holds a stick anchor, the tangential force is a
//! spring of stiffness `k_env` to it, and the anchor slides once the spring
//! would exceed the Coulomb bound. The pivot uses Coulomb friction regularized
//! linearly below `slip_velocity`.

mod reward;
mod sensor;

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use reward::{
    assembly_reward, assembly_reward_scaled, pivot_reward, planar_rotation, randomize_initial_pose,
    success_check, task_satisfied, EpisodeMetrics, MetricsAccumulator,
};
pub use sensor::{sensor_read, Sensor};

const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Wall,
    Assembly,
    Pivot,
}

impl Task {
    pub fn axes(self) -> usize {
        match self {
            Task::Wall => 1,
            Task::Assembly | Task::Pivot => 2,
        }
    }

    pub fn axis_labels(self) -> &'static [&'static str] {
        match self {
            Task::Wall => &["z"],
            Task::Assembly | Task::Pivot => &["x", "z"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Wall => "wall",
            Task::Assembly => "assembly",
            Task::Pivot => "pivot",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wall" => Ok(Task::Wall),
            "assembly" => Ok(Task::Assembly),
            "pivot" => Ok(Task::Pivot),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// Task geometry in metres and kilograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    Wall {
        /// Depth below the surface the desired trajectory presses to.
        press_depth: f64,
    },
    Assembly {
        peg_width: f64,
        clearance: f64,
        hole_depth: f64,
        /// Hole position uncertainty; the true hole is uniform in `±` this.
        hole_offset_range: f64,
    },
    Pivot {
        length: f64,
        thickness: f64,
        mass: f64,
        /// Viscous damping about the pivot edge, N·m·s/rad.
        rot_damping: f64,
    },
}

impl Geometry {
    pub fn task(&self) -> Task {
        match self {
            Geometry::Wall { .. } => Task::Wall,
            Geometry::Assembly { .. } => Task::Assembly,
            Geometry::Pivot { .. } => Task::Pivot,
        }
    }

    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Wall => Geometry::Wall { press_depth: 0.01 },
            Task::Assembly => Geometry::Assembly {
                peg_width: 0.04,
                clearance: 0.002,
                hole_depth: 0.02,
                hole_offset_range: 0.003,
            },
            Task::Pivot => Geometry::Pivot {
                length: 0.1,
                thickness: 0.026,
                mass: 0.07,
                rot_damping: 0.02,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Geometry::Wall { press_depth } => press_depth >= 0.0,
            Geometry::Assembly {
                peg_width,
                clearance,
                hole_depth,
                hole_offset_range,
            } => peg_width > 0.0 && clearance > 0.0 && hole_depth > 0.0 && hole_offset_range >= 0.0,
            Geometry::Pivot {
                length,
                thickness,
                mass,
                rot_damping,
            } => length > 0.0 && thickness > 0.0 && thickness < length && mass > 0.0 && rot_damping >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid geometry {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Contact stiffness, N/m.
    pub k_env: f64,
    /// Contact damping, N·s/m.
    pub d_env: f64,
    /// Coulomb friction coefficient.
    pub mu: f64,
    pub geometry: Geometry,
    /// Force noise standard deviation, N.
    pub noise_sigma: f64,
    /// Measured force is clipped to `±force_clip`, N.
    pub force_clip: f64,
    /// Measurement delay in control steps.
    #[serde(default)]
    pub latency_steps: usize,
    /// Slip speed below which friction is scaled down linearly, m/s.
    #[serde(default = "default_slip_velocity")]
    pub slip_velocity: f64,
    /// Physics substeps per control step (pivot object dynamics only).
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub seed: u64,
}

fn default_slip_velocity() -> f64 {
    1e-3
}

fn default_substeps() -> usize {
    20
}

impl EnvConfig {
    pub fn nominal(task: Task) -> Self {
        let mu = match task {
            Task::Pivot => 0.7,
            _ => 0.3,
        };
        Self {
            k_env: 3000.0,
            d_env: 10.0,
            mu,
            geometry: Geometry::default_for(task),
            noise_sigma: 0.2,
            force_clip: 10.0,
            latency_steps: 0,
            slip_velocity: default_slip_velocity(),
            substeps: default_substeps(),
            seed: 0,
        }
    }

    pub fn task(&self) -> Task {
        self.geometry.task()
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.k_env >= 0.0, "k_env ≥ 0"),
            (self.d_env >= 0.0, "d_env ≥ 0"),
            (self.mu >= 0.0, "mu ≥ 0"),
            (self.noise_sigma >= 0.0, "noise_sigma ≥ 0"),
            (self.force_clip > 0.0, "force_clip > 0"),
            (self.slip_velocity > 0.0, "slip_velocity > 0"),
            (self.substeps >= 1, "substeps ≥ 1"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(Error::Config(format!("environment requires {what}")));
            }
        }
        self.geometry.validate()
    }
}

/// Contact surfaces reported in [`EnvState::contacts`], per task:
/// wall `[surface]`, assembly `[surface, hole_wall, hole_bottom]`,
/// pivot `[object_face, floor]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pose: Vec<f64>,
    pub vel: Vec<f64>,
    /// Pivot object angle from lying flat (0) to upright (π/2).
    pub pivot_angle: f64,
    pub pivot_rate: f64,
    /// True hole centre along `x` for the assembly task.
    pub hole_x: f64,
    pub in_hole: bool,
    pub contacts: Vec<bool>,
    /// Stick anchor of each contact along its tangent, if in contact.
    #[serde(default)]
    pub anchors: Vec<Option<f64>>,
}

impl EnvState {
    pub fn new(task: Task, pose: Vec<f64>) -> Result<Self> {
        if pose.len() != task.axes() {
            return Err(Error::Shape(format!(
                "{task} pose needs {} axes, got {}",
                task.axes(),
                pose.len()
            )));
        }
        let surfaces = match task {
            Task::Wall => 1,
            Task::Assembly => 3,
            Task::Pivot => 2,
        };
        Ok(Self {
            vel: vec![0.0; pose.len()],
            pose,
            pivot_angle: 0.0,
            pivot_rate: 0.0,
            hole_x: 0.0,
            in_hole: false,
            contacts: vec![false; surfaces],
            anchors: vec![None; surfaces],
        })
    }

    pub fn in_contact(&self) -> bool {
        self.contacts.iter().any(|&c| c)
    }

    pub fn is_finite(&self) -> bool {
        self.pose
            .iter()
            .chain(&self.vel)
            .chain([&self.pivot_angle, &self.pivot_rate, &self.hole_x])
            .all(|v| v.is_finite())
    }
}

/// `k·δ + d·max(0, δ̇)` when `δ > 0`, else zero.
pub fn penalty_normal(k: f64, d: f64, penetration: f64, rate: f64) -> f64 {
    if penetration > 0.0 {
        k * penetration + d * rate.max(0.0)
    } else {
        0.0
    }
}

/// Friction opposing `slip`, saturating at `μ·f_n` once `|slip| ≥ v_eps`.
pub fn coulomb_friction(mu: f64, normal: f64, slip: f64, v_eps: f64) -> f64 {
    -mu * normal * (slip / v_eps).clamp(-1.0, 1.0)
}

/// Elastic-plastic friction at tangential position `pos`.
///
/// Sticks to `anchor` with stiffness `k_t` and drags the anchor along once
/// the spring force would exceed `μ·f_n`. Clears the anchor when `normal` is
/// not positive.
pub fn anchored_friction(mu: f64, normal: f64, k_t: f64, pos: f64, anchor: &mut Option<f64>) -> f64 {
    if !(normal > 0.0) {
        *anchor = None;
        return 0.0;
    }
    let a = anchor.get_or_insert(pos);
    let cap = mu * normal;
    let stretch = pos - *a;
    if k_t * stretch.abs() > cap {
        *a = pos - stretch.signum() * cap / k_t;
        -stretch.signum() * cap
    } else {
        -k_t * stretch
    }
}

/// Advances the environment to the commanded pose and returns the new state
/// and the raw contact force on the tool.
pub fn env_step(
    state: &EnvState,
    cfg: &EnvConfig,
    pose: &[f64],
    vel: &[f64],
    dt: f64,
) -> Result<(EnvState, Vec<f64>)> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    if pose.len() != state.pose.len() || vel.len() != state.pose.len() {
        return Err(Error::Shape(format!(
            "command has {}/{} axes, environment has {}",
            pose.len(),
            vel.len(),
            state.pose.len()
        )));
    }
    if pose.iter().chain(vel).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("commanded pose"));
    }
    let mut next = state.clone();
    let force = match &cfg.geometry {
        Geometry::Wall { .. } => wall_force(&mut next, cfg, pose, vel),
        Geometry::Assembly {
            clearance,
            hole_depth,
            ..
        } => peg_force(&mut next, cfg, pose, vel, 0.5 * clearance, *hole_depth),
        Geometry::Pivot {
            length,
            thickness,
            mass,
            rot_damping,
        } => {
            let obj = PivotObject {
                length: *length,
                thickness: *thickness,
                mass: *mass,
                rot_damping: *rot_damping,
            };
            pivot_step(&mut next, cfg, &obj, pose, vel, dt)
        }
    };
    next.pose = pose.to_vec();
    next.vel = vel.to_vec();
    if !next.is_finite() || force.iter().any(|f| !f.is_finite()) {
        return Err(Error::Numeric("environment state"));
    }
    Ok((next, force))
}

fn wall_force(state: &mut EnvState, cfg: &EnvConfig, pose: &[f64], vel: &[f64]) -> Vec<f64> {
    let fz = penalty_normal(cfg.k_env, cfg.d_env, -pose[0], -vel[0]);
    state.contacts[0] = -pose[0] > 0.0;
    vec![fz]
}

fn peg_force(
    state: &mut EnvState,
    cfg: &EnvConfig,
    pose: &[f64],
    vel: &[f64],
    half_gap: f64,
    hole_depth: f64,
) -> Vec<f64> {
    let (x, z) = (pose[0], pose[1]);
    let (vx, vz) = (vel[0], vel[1]);
    let rel = x - state.hole_x;
    if !state.in_hole && z < 0.0 && rel.abs() <= half_gap {
        state.in_hole = true;
    } else if state.in_hole && z >= 0.0 {
        state.in_hole = false;
    }
    state.contacts.iter_mut().for_each(|c| *c = false);
    state.anchors.resize(3, None);
    let (mut fx, mut fz) = (0.0, 0.0);
    let (mut f_surface, mut f_wall, mut f_bottom) = (0.0, 0.0, 0.0);
    if state.in_hole {
        let over = rel.abs() - half_gap;
        if over > 0.0 {
            let side = rel.signum();
            f_wall = penalty_normal(cfg.k_env, cfg.d_env, over, side * vx);
            fx -= side * f_wall;
            state.contacts[1] = true;
        }
        let pen = -hole_depth - z;
        if pen > 0.0 {
            f_bottom = penalty_normal(cfg.k_env, cfg.d_env, pen, -vz);
            fz += f_bottom;
            state.contacts[2] = true;
        }
    } else if z < 0.0 {
        f_surface = penalty_normal(cfg.k_env, cfg.d_env, -z, -vz);
        fz = f_surface;
        state.contacts[0] = true;
    }
    let k_t = cfg.k_env;
    fx += anchored_friction(cfg.mu, f_surface, k_t, x, &mut state.anchors[0]);
    fz += anchored_friction(cfg.mu, f_wall, k_t, z, &mut state.anchors[1]);
    fx += anchored_friction(cfg.mu, f_bottom, k_t, x, &mut state.anchors[2]);
    vec![fx, fz]
}

struct PivotObject {
    length: f64,
    thickness: f64,
    mass: f64,
    rot_damping: f64,
}

impl PivotObject {
    /// Inertia of a uniform slab about its edge.
    fn inertia(&self) -> f64 {
        self.mass * (self.length.powi(2) + self.thickness.powi(2)) / 3.0
    }

    /// Finger force on the object's rear face and the moment it exerts on
    /// the object about the pivot edge.
    fn face_contact(&self, cfg: &EnvConfig, theta: f64, omega: f64, p: [f64; 2], v: [f64; 2]) -> Option<([f64; 2], f64)> {
        let (s_th, c_th) = theta.sin_cos();
        let axis = [c_th, s_th];
        let normal = [-s_th, c_th];
        let along = p[0] * axis[0] + p[1] * axis[1];
        let across = p[0] * normal[0] + p[1] * normal[1];
        let pen = self.length - along;
        if pen <= 0.0 || pen > 0.5 * self.length || across < 0.0 || across > self.thickness {
            return None;
        }
        // Velocity of the material point under the finger: ω × r.
        let v_face = [-omega * p[1], omega * p[0]];
        let rel = [v[0] - v_face[0], v[1] - v_face[1]];
        let pen_rate = -(rel[0] * axis[0] + rel[1] * axis[1]);
        let slip = rel[0] * normal[0] + rel[1] * normal[1];
        let f_n = penalty_normal(cfg.k_env, cfg.d_env, pen, pen_rate);
        let f_t = coulomb_friction(cfg.mu, f_n, slip, cfg.slip_velocity);
        let on_finger = [
            f_n * axis[0] + f_t * normal[0],
            f_n * axis[1] + f_t * normal[1],
        ];
        // Object receives the reaction at the contact point.
        let moment = -(p[0] * on_finger[1] - p[1] * on_finger[0]);
        Some((on_finger, moment))
    }

    fn gravity_moment(&self, theta: f64) -> f64 {
        let (s_th, c_th) = theta.sin_cos();
        let com_x = 0.5 * self.length * c_th - 0.5 * self.thickness * s_th;
        -self.mass * GRAVITY * com_x
    }
}

fn pivot_step(
    state: &mut EnvState,
    cfg: &EnvConfig,
    obj: &PivotObject,
    pose: &[f64],
    vel: &[f64],
    dt: f64,
) -> Vec<f64> {
    let n_sub = cfg.substeps;
    let h = dt / n_sub as f64;
    let inertia = obj.inertia();
    let start = [state.pose[0], state.pose[1]];
    let v = [vel[0], vel[1]];
    let mut force = [0.0, 0.0];
    let mut face = false;
    let mut floor = false;
    for j in 1..=n_sub {
        let s = j as f64 / n_sub as f64;
        let p = [
            start[0] + s * (pose[0] - start[0]),
            start[1] + s * (pose[1] - start[1]),
        ];
        let contact = obj.face_contact(cfg, state.pivot_angle, state.pivot_rate, p, v);
        let (f_face, moment) = contact.unwrap_or(([0.0, 0.0], 0.0));
        face = contact.is_some();

        let f_floor_n = penalty_normal(cfg.k_env, cfg.d_env, -p[1], -v[1]);
        floor = f_floor_n > 0.0;
        let f_floor_t = coulomb_friction(cfg.mu, f_floor_n, v[0], cfg.slip_velocity);
        force = [f_face[0] + f_floor_t, f_face[1] + f_floor_n];

        let net = moment + obj.gravity_moment(state.pivot_angle) - obj.rot_damping * state.pivot_rate;
        let mut omega = state.pivot_rate + h * net / inertia;
        let mut theta = state.pivot_angle + h * omega;
        if theta <= 0.0 {
            theta = 0.0;
            omega = omega.max(0.0);
        }
        if theta >= FRAC_PI_2 {
            theta = FRAC_PI_2;
            omega = omega.min(0.0);
        }
        state.pivot_angle = theta;
        state.pivot_rate = omega;
    }
    state.contacts[0] = face;
    state.contacts[1] = floor;
    force.to_vec()
}

/// Stateful wrapper around [`env_step`] that also owns the measurement model.
#[derive(Debug, Clone)]
pub struct Environment {
    cfg: EnvConfig,
    state: EnvState,
    force: Vec<f64>,
}

impl Environment {
    pub fn new(cfg: EnvConfig, state: EnvState) -> Result<Self> {
        cfg.validate()?;
        if state.pose.len() != cfg.task().axes() {
            return Err(Error::Shape(format!(
                "{} environment needs {} axes",
                cfg.task(),
                cfg.task().axes()
            )));
        }
        let n = state.pose.len();
        let (state, force) = env_step(&state, &cfg, &state.pose.clone(), &vec![0.0; n], 1e-3)?;
        Ok(Self { cfg, state, force })
    }

    pub fn step(&mut self, pose: &[f64], vel: &[f64], dt: f64) -> Result<&[f64]> {
        let (state, force) = env_step(&self.state, &self.cfg, pose, vel, dt)?;
        self.state = state;
        self.force = force;
        Ok(&self.force)
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn force(&self) -> &[f64] {
        &self.force
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }
}
