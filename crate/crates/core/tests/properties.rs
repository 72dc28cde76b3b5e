use admitlearn::adaptation::AdaptationConfig;
use admitlearn::admittance::{critical_damping, step_error_dynamics, AdmittanceParams, ErrorState, ParamVector};
use admitlearn::cost::{fitave, itae, trajectory_cost, CostWeights};
use admitlearn::env::{EnvConfig, Task};
use admitlearn::force_window::ForceWindow;
use admitlearn::offline::{cem_gain_search, GainSearchConfig};
use admitlearn::optimizer::{optimize_residual, rollout_cost, OptProblem, SearchBounds};
use proptest::prelude::*;

fn energy(m: f64, k: f64, x: &ErrorState) -> f64 {
    0.5 * m * x.e_dot[0].powi(2) + 0.5 * k * x.e[0].powi(2)
}

fn one_axis(m: f64, k: f64, d: f64) -> ParamVector {
    AdmittanceParams::new(vec![m], vec![k], vec![d]).unwrap().to_param_vector()
}

/// Random error trajectory of `n` axes.
fn trajectory(n: usize) -> impl Strategy<Value = Vec<ErrorState>> {
    prop::collection::vec(
        (prop::collection::vec(-1.0..1.0f64, n), prop::collection::vec(-1.0..1.0f64, n)),
        1..60,
    )
    .prop_map(|v| v.into_iter().map(|(e, ed)| ErrorState::new(e, ed).unwrap()).collect())
}

proptest! {
    #[test]
    fn gains_roundtrip(
        m in prop::collection::vec(1e-2..1e2f64, 1..6),
        seed in prop::collection::vec((1e-1..1e4f64, 1e-1..1e3f64), 6),
    ) {
        let n = m.len();
        let k: Vec<f64> = seed[..n].iter().map(|p| p.0).collect();
        let d: Vec<f64> = seed[..n].iter().map(|p| p.1).collect();
        let p = AdmittanceParams::new(m, k, d).unwrap();
        let back = p.to_param_vector().recover_gains().unwrap();
        for (a, b) in p.m().iter().chain(p.k()).chain(p.d()).zip(back.m().iter().chain(back.k()).chain(back.d())) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }

    #[test]
    fn param_vector_roundtrip(u in prop::collection::vec(1e-3..1e3f64, 3)) {
        let pv = ParamVector::from_flat(&u).unwrap();
        let again = pv.recover_gains().unwrap().to_param_vector().to_flat();
        for (a, b) in u.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }

    /// Above a damping ratio of `hω/4` every semi-implicit Euler step
    /// removes energy.
    #[test]
    fn damped_energy_never_increases(
        m in 0.1..10.0f64,
        k in 1.0..5000.0f64,
        dt_frac in 0.05..1.0f64,
        zeta_extra in 0.0..2.0f64,
        e0 in -0.05..0.05f64,
        v0 in -0.5..0.5f64,
    ) {
        let omega = (k / m).sqrt();
        let dt = 0.1 * dt_frac / omega;
        let zeta = dt * omega / 4.0 * 1.01 + zeta_extra;
        let d = 2.0 * zeta * (m * k).sqrt();
        let u = one_axis(m, k, d);
        let mut x = ErrorState::new(vec![e0], vec![v0]).unwrap();
        for _ in 0..500 {
            let next = step_error_dynamics(&x, &[0.0], &u, dt).unwrap();
            prop_assert!(energy(m, k, &next) <= energy(m, k, &x) * (1.0 + 1e-12));
            x = next;
        }
    }

    /// Without damping the integrator conserves `V − ½·dt·k·e·ė` exactly.
    #[test]
    fn undamped_shadow_energy_conserved(
        m in 0.1..10.0f64,
        k in 1.0..5000.0f64,
        e0 in -0.05..0.05f64,
        v0 in -0.5..0.5f64,
    ) {
        let dt = 0.1 * (m / k).sqrt();
        let u = ParamVector::new(vec![1.0 / m], vec![k / m], vec![1e-300]).unwrap();
        let shadow = |x: &ErrorState| energy(m, k, x) - 0.5 * dt * k * x.e[0] * x.e_dot[0];
        let mut x = ErrorState::new(vec![e0], vec![v0]).unwrap();
        let s0 = shadow(&x);
        for _ in 0..1000 {
            x = step_error_dynamics(&x, &[0.0], &u, dt).unwrap();
        }
        prop_assert!((shadow(&x) - s0).abs() <= 1e-9 * s0.max(1e-12));
    }

    #[test]
    fn critical_damping_step_is_monotone(m in 0.1..10.0f64, k in 10.0..5000.0f64, f in -20.0..20.0f64) {
        prop_assume!(f.abs() > 1e-3);
        let d = critical_damping(m, k).unwrap();
        let dt = 0.1 * (m / k).sqrt();
        let u = one_axis(m, k, d);
        let mut x = ErrorState::zeros(1);
        let mut prev = 0.0;
        for _ in 0..2000 {
            x = step_error_dynamics(&x, &[f], &u, dt).unwrap();
            prop_assert!(x.e_dot[0] * f >= -1e-12 * f.abs());
            prop_assert!((x.e[0] - prev) * f >= -1e-15);
            prev = x.e[0];
        }
    }

    #[test]
    fn cost_is_linear_in_w(states in trajectory(3), w in 0.0..=1.0f64, dt in 1e-3..0.1f64) {
        let c = trajectory_cost(&states, dt, &CostWeights::new(w, 1.0).unwrap()).unwrap();
        let expect = w * itae(&states, dt).unwrap() + (1.0 - w) * fitave(&states, dt).unwrap();
        prop_assert!((c - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn later_error_costs_more(len in 4usize..80, at in 0usize..70, mag in 1e-3..1.0f64, w in 0.0..=1.0f64) {
        prop_assume!(at + 1 < len);
        let pulse = |k: usize| {
            (0..len)
                .map(|j| if j == k { ErrorState::new(vec![mag], vec![mag]).unwrap() } else { ErrorState::zeros(1) })
                .collect::<Vec<_>>()
        };
        let weights = CostWeights::new(w, 1.0).unwrap();
        let early = trajectory_cost(&pulse(at), 0.01, &weights).unwrap();
        let late = trajectory_cost(&pulse(at + 1), 0.01, &weights).unwrap();
        prop_assert!(late > early);
    }
}

fn window(forces: &[f64]) -> ForceWindow {
    let mut w = ForceWindow::new(forces.len(), 0.01).unwrap();
    for (i, f) in forces.iter().enumerate() {
        w.record(i as f64 * 0.01, &[*f]).unwrap();
    }
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn optimizer_is_feasible_and_never_worse(
        k in 10.0..5000.0f64,
        zeta in 0.1..3.0f64,
        m in 0.1..10.0f64,
        forces in prop::collection::vec(-30.0..30.0f64, 20..100),
        e0 in -0.01..0.01f64,
        w in 0.0..=1.0f64,
    ) {
        let d = (2.0 * zeta * (m * k).sqrt()).clamp(1.0, 500.0);
        let u = one_axis(m, k, d);
        let x0 = ErrorState::new(vec![e0], vec![0.0]).unwrap();
        let weights = CostWeights::new(w, 1.0).unwrap();
        let p = OptProblem::replay(u.clone(), x0, window(&forces), weights, &SearchBounds::default(), 60);
        let r = optimize_residual(&p).unwrap();
        prop_assert!(r.cost_after <= r.cost_before);
        prop_assert!(r.evaluations <= p.budget);
        let next = r.updated(&u).unwrap().to_flat();
        prop_assert!(next.iter().all(|v| *v >= p.epsilon));
        let g = ParamVector::from_flat(&next).unwrap().recover_gains().unwrap();
        let gains = [g.m()[0], g.k()[0], g.d()[0]];
        for j in 0..3 {
            prop_assert!(gains[j] >= p.lower[j] * (1.0 - 1e-9) && gains[j] <= p.upper[j] * (1.0 + 1e-9));
        }
        let recomputed = rollout_cost(&p, &r.delta_u).unwrap();
        prop_assert!((recomputed - r.cost_after).abs() <= 1e-9 * r.cost_after.max(1e-12));
    }
}

#[test]
fn low_damping_can_gain_energy() {
    // Below a damping ratio of hω/4 a single step can raise V.
    let (m, k) = (1.0, 100.0);
    let dt = 0.01;
    let u = one_axis(m, k, 2.0 * 0.001 * (m * k).sqrt());
    let mut x = ErrorState::new(vec![0.01], vec![0.0]).unwrap();
    let mut rose = false;
    for _ in 0..200 {
        let next = step_error_dynamics(&x, &[0.0], &u, dt).unwrap();
        rose |= energy(m, k, &next) > energy(m, k, &x);
        x = next;
    }
    assert!(rose);
}

#[test]
fn cem_history_is_monotone() {
    let env = EnvConfig::nominal(Task::Wall);
    let cfg = GainSearchConfig {
        population: 8,
        elites: 2,
        iterations: 3,
        seeds: vec![0, 1],
        seed: 5,
        ..GainSearchConfig::default()
    };
    let r = cem_gain_search(&cfg, &env, 0.01).unwrap();
    assert!(r.history.windows(2).all(|w| w[1] >= w[0]));
    assert!(r.objective >= r.initial_objective);
    assert_eq!(r.history.len(), cfg.iterations + 1);
    assert_eq!(cem_gain_search(&cfg, &env, 0.01).unwrap(), r);
}

#[test]
fn adaptation_defaults_validate() {
    AdaptationConfig::new(1.0, 0.4).validate(0.01).unwrap();
}
