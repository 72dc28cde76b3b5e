mod common;

use admitlearn::adaptation::{run_episode, EpisodeSpec};
use admitlearn::admittance::{AdmittanceParams, ParamVector};
use admitlearn::env::{EnvConfig, Task};
use admitlearn::offline::{scripted_trajectory, InitialConditions};
use admitlearn::optimizer::{optimize_residual, rollout_cost};
use common::*;

fn delta_for(p: &admitlearn::optimizer::OptProblem, gains: [f64; 3]) -> Vec<f64> {
    let u = AdmittanceParams::new(vec![gains[0]], vec![gains[1]], vec![gains[2]])
        .unwrap()
        .to_param_vector()
        .to_flat();
    u.iter().zip(p.u_init.to_flat()).map(|(a, b)| a - b).collect()
}

#[test]
fn library_cost_matches_direct_rollout() {
    for seed in 0..30 {
        let c = random_case(seed);
        let p = problem(c.gains, c.x0, &c.forces, c.w, 10);
        for g in [c.gains, [2.0, 300.0, 40.0], [0.3, 4000.0, 9.0]] {
            let lib = rollout_cost(&p, &delta_for(&p, g)).unwrap();
            let direct = direct_cost(g, c.x0, &c.forces, c.w);
            assert!((lib - direct).abs() <= 1e-9 * direct.max(1e-12), "{lib} vs {direct}");
        }
    }
}

/// First one-second window of a stiff fixed-gain rollout against the
/// stiffened wall, with the error state at its start.
fn stiff_bounce_window() -> (Vec<f64>, (f64, f64)) {
    let mut env = EnvConfig::nominal(Task::Wall);
    env.k_env *= 10.0;
    env.latency_steps = 1;
    env.force_clip = 200.0;
    let ic = InitialConditions::sample(&env.geometry, 0);
    let plan = scripted_trajectory(&env.geometry, &ic.pose, DT).unwrap();
    let gains = AdmittanceParams::new(vec![1.0], vec![2500.0], vec![100.0]).unwrap();
    let spec = EpisodeSpec::new(env, plan, gains, ic.env_state(Task::Wall).unwrap(), ic.sensor_seed);
    let out = run_episode(&spec).unwrap();
    assert!(out.trace.separations_after(0.0) >= 3);
    (out.trace.measured_forces(0)[..100].to_vec(), (0.0, 0.0))
}

#[test]
fn stiff_bounce_update_agrees_with_grid() {
    let (forces, x0) = stiff_bounce_window();
    assert!(forces.iter().any(|f| f.abs() > 20.0));
    let start = [1.0, 2500.0, 100.0];
    let p = problem(start, x0, &forces, 0.4, 200);
    let r = optimize_residual(&p).unwrap();
    let (grid_cost, grid_gains) = grid_best(&p, x0, &forces, 0.4, 5);
    assert!(r.cost_after <= 1.05 * grid_cost, "{} vs grid {grid_cost}", r.cost_after);

    let before = p.u_init.clone();
    let after = r.updated(&before).unwrap();
    let grid_u = ParamVector::from_flat(
        &AdmittanceParams::new(vec![grid_gains[0]], vec![grid_gains[1]], vec![grid_gains[2]])
            .unwrap()
            .to_param_vector()
            .to_flat(),
    )
    .unwrap();
    // Stiffness per unit mass drops, as it does at the grid optimum.
    assert!(after.k_norm()[0] < before.k_norm()[0]);
    assert!(grid_u.k_norm()[0] < before.k_norm()[0]);
    // The damping direction follows the grid optimum.
    let d_opt = after.d_norm()[0] - before.d_norm()[0];
    let d_grid = grid_u.d_norm()[0] - before.d_norm()[0];
    assert_eq!(d_opt.signum(), d_grid.signum(), "optimizer {d_opt}, grid {d_grid}");
}
