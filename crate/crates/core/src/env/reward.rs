use std::f64::consts::FRAC_PI_2;

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnvConfig, EnvState, Geometry, Task};
use crate::error::Result;

/// `10^(1 − ‖pos − goal‖₂)` with distances in metres.
pub fn assembly_reward(pos: &[f64], goal: &[f64]) -> f64 {
    assembly_reward_scaled(pos, goal, 1.0)
}

/// As [`assembly_reward`] with distances multiplied by `unit_scale` first
/// (e.g. 100 to measure in centimetres).
pub fn assembly_reward_scaled(pos: &[f64], goal: &[f64], unit_scale: f64) -> f64 {
    let dist = pos
        .iter()
        .zip(goal)
        .map(|(p, g)| (p - g).powi(2))
        .sum::<f64>()
        .sqrt();
    10f64.powf(1.0 - unit_scale * dist)
}

/// `π/2 − d` where `d` is the geodesic distance between two rotations.
pub fn pivot_reward(r: &Rotation3<f64>, r_goal: &Rotation3<f64>) -> f64 {
    let m = r_goal.matrix() * r.matrix().transpose();
    let c = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    FRAC_PI_2 - c.acos()
}

/// Rotation of the planar pivot angle about the pivot axis.
pub fn planar_rotation(angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), angle)
}

/// Uniform initial tool pose for an episode, in metres.
///
/// * wall: `z ∈ 30 ± 5 mm` above the surface
/// * assembly: `x ∈ ±30 mm`, `z ∈ 30 ± 5 mm`
/// * pivot: `x ∈ 150 ± 30 mm`, `z ∈ 5 ± 5 mm` from the wall and floor
pub fn randomize_initial_pose<R: Rng + ?Sized>(task: Task, rng: &mut R) -> Vec<f64> {
    match task {
        Task::Wall => vec![rng.random_range(0.025..=0.035)],
        Task::Assembly => vec![
            rng.random_range(-0.03..=0.03),
            rng.random_range(0.025..=0.035),
        ],
        Task::Pivot => vec![rng.random_range(0.12..=0.18), rng.random_range(0.0..=0.01)],
    }
}

/// Insertion depth, as a fraction of hole depth, counted as success.
pub const INSERTION_FRACTION: f64 = 0.8;
/// Pivot success tolerance from upright, radians.
pub const PIVOT_TOLERANCE: f64 = 5.0 * std::f64::consts::PI / 180.0;
/// Wall task: speed below which a pressed tool counts as settled, m/s.
pub const WALL_SETTLE_SPEED: f64 = 0.005;

/// Whether the state meets the task goal.
pub fn task_satisfied(cfg: &EnvConfig, state: &EnvState) -> bool {
    match cfg.geometry {
        Geometry::Wall { .. } => state.in_contact() && state.vel[0].abs() < WALL_SETTLE_SPEED,
        Geometry::Assembly { hole_depth, .. } => {
            state.in_hole && -state.pose[1] >= INSERTION_FRACTION * hole_depth
        }
        Geometry::Pivot { .. } => state.pivot_angle >= FRAC_PI_2 - PIVOT_TOLERANCE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    /// Simulated seconds to completion; absent for failed episodes.
    pub completion_time: Option<f64>,
    /// Peak Euclidean norm of the raw contact force, N.
    pub max_force: f64,
}

/// Running episode statistics.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    max_force: f64,
    satisfied_since: Option<f64>,
}

impl MetricsAccumulator {
    pub fn observe(&mut self, t: f64, raw_force: &[f64], satisfied: bool) {
        let norm = raw_force.iter().map(|f| f * f).sum::<f64>().sqrt();
        self.max_force = self.max_force.max(norm);
        match (satisfied, self.satisfied_since) {
            (true, None) => self.satisfied_since = Some(t),
            (false, Some(_)) => self.satisfied_since = None,
            _ => {}
        }
    }

    pub fn max_force(&self) -> f64 {
        self.max_force
    }
}

/// Final verdict for an episode that finished or timed out.
pub fn success_check(cfg: &EnvConfig, state: &EnvState, acc: &MetricsAccumulator) -> Result<EpisodeMetrics> {
    let success = task_satisfied(cfg, state);
    Ok(EpisodeMetrics {
        success,
        completion_time: if success { acc.satisfied_since } else { None },
        max_force: acc.max_force,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn assembly_reward_values() {
        assert_eq!(assembly_reward(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]), 10.0);
        assert!((assembly_reward(&[1.0, 0.0, 0.0], &[0.0; 3]) - 1.0).abs() < 1e-15);
        assert!((assembly_reward(&[0.3, 0.4], &[0.0, 0.0]) - 10f64.sqrt()).abs() < 1e-12);
        assert!((assembly_reward_scaled(&[0.01], &[0.0], 100.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pivot_reward_values() {
        let goal = planar_rotation(FRAC_PI_2);
        assert!((pivot_reward(&goal, &goal) - FRAC_PI_2).abs() < 1e-7);
        assert!(pivot_reward(&planar_rotation(0.0), &goal).abs() < 1e-12);
        let r = pivot_reward(&planar_rotation(FRAC_PI_2 / 2.0), &goal);
        assert!((r - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn initial_pose_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let a = randomize_initial_pose(Task::Assembly, &mut rng);
            assert!((0.025..=0.035).contains(&a[1]));
            assert!((-0.03..=0.03).contains(&a[0]));
            let p = randomize_initial_pose(Task::Pivot, &mut rng);
            assert!((0.12..=0.18).contains(&p[0]));
            assert!((0.0..=0.01).contains(&p[1]));
        }
    }

    #[test]
    fn initial_pose_deterministic() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..20)
                .map(|_| randomize_initial_pose(Task::Assembly, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn success_and_metrics() {
        let cfg = EnvConfig::nominal(Task::Assembly);
        let mut state = EnvState::new(Task::Assembly, vec![0.0, -0.019]).unwrap();
        state.in_hole = true;
        let mut acc = MetricsAccumulator::default();
        acc.observe(0.0, &[3.0, 4.0], false);
        acc.observe(0.5, &[1.0, 0.0], true);
        let m = success_check(&cfg, &state, &acc).unwrap();
        assert!(m.success);
        assert_eq!(m.completion_time, Some(0.5));
        assert_eq!(m.max_force, 5.0);

        let state = EnvState::new(Task::Assembly, vec![0.01, 0.001]).unwrap();
        let m = success_check(&cfg, &state, &acc).unwrap();
        assert!(!m.success);
        assert_eq!(m.completion_time, None);
    }
}
