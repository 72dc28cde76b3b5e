use admitlearn::adaptation::{run_episode, AdaptationConfig, EpisodeSpec, ForceSource, UpdateMode};
use admitlearn::admittance::AdmittanceParams;
use admitlearn::env::{EnvConfig, EnvState, Task};
use admitlearn::force_window::ForceWindow;
use admitlearn::offline::{scripted_trajectory, InitialConditions, TrajectoryPlan};

fn real_wall() -> EnvConfig {
    let mut env = EnvConfig::nominal(Task::Wall);
    env.k_env *= 10.0;
    env.latency_steps = 1;
    env.force_clip = 200.0;
    env
}

fn wall_spec(seed: u64, adaptation: Option<AdaptationConfig>) -> EpisodeSpec {
    let env = real_wall();
    let ic = InitialConditions::sample(&env.geometry, seed);
    let plan = scripted_trajectory(&env.geometry, &ic.pose, 0.01).unwrap();
    let gains = AdmittanceParams::new(vec![1.0], vec![2500.0], vec![100.0]).unwrap();
    let mut spec = EpisodeSpec::new(env, plan, gains, ic.env_state(Task::Wall).unwrap(), ic.sensor_seed);
    spec.duration = 3.0;
    spec.adaptation = adaptation;
    spec
}

#[test]
fn replay_returns_recorded_bits() {
    let values = [0.1, -3.25e-7, 1.0 / 3.0, f64::MIN_POSITIVE, 123456.789, -0.0];
    let mut w = ForceWindow::new(values.len(), 0.01).unwrap();
    for (i, v) in values.iter().enumerate() {
        w.record(i as f64 * 0.01, &[*v, -*v]).unwrap();
    }
    for (i, v) in values.iter().enumerate() {
        let f = w.replay(i).unwrap();
        assert_eq!(f[0].to_bits(), v.to_bits());
        assert_eq!(f[1].to_bits(), (-*v).to_bits());
    }
}

#[test]
fn episodes_are_deterministic() {
    let spec = wall_spec(3, Some(AdaptationConfig::new(1.0, 0.4)));
    let a = run_episode(&spec).unwrap();
    let b = run_episode(&spec).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.final_gains, b.final_gains);
    assert!(!a.trace.updates.is_empty());
}

#[test]
fn background_without_delay_matches_interleaved() {
    let inline = run_episode(&wall_spec(1, Some(AdaptationConfig::new(1.0, 0.4)))).unwrap();
    let bg = AdaptationConfig {
        mode: UpdateMode::Background { apply_delay_steps: 0 },
        ..AdaptationConfig::new(1.0, 0.4)
    };
    let background = run_episode(&wall_spec(1, Some(bg))).unwrap();
    assert_eq!(inline.trace, background.trace);
}

#[test]
fn delayed_background_applies_later() {
    let bg = AdaptationConfig {
        mode: UpdateMode::Background { apply_delay_steps: 5 },
        ..AdaptationConfig::new(1.0, 0.4)
    };
    let out = run_episode(&wall_spec(1, Some(bg))).unwrap();
    for u in &out.trace.updates {
        assert!((u.applied_at - u.t - 0.05).abs() < 1e-9);
    }
}

#[test]
fn force_models_agree_without_contact() {
    let mut env = EnvConfig::nominal(Task::Wall);
    env.noise_sigma = 0.0;
    let steps = 300;
    let plan = TrajectoryPlan {
        task: Task::Wall,
        dt: 0.01,
        pos: vec![vec![0.5]; steps],
        vel: vec![vec![0.0]; steps],
        acc: vec![vec![0.0]; steps],
    };
    let gains = AdmittanceParams::new(vec![1.0], vec![500.0], vec![40.0]).unwrap();
    let run = |force_source| {
        let spec = EpisodeSpec::new(
            env.clone(),
            plan.clone(),
            gains.clone(),
            EnvState::new(Task::Wall, vec![0.5]).unwrap(),
            0,
        )
        .with_adaptation(AdaptationConfig {
            force_source,
            ..AdaptationConfig::new(1.0, 0.4)
        });
        run_episode(&spec).unwrap()
    };
    let replay = run(ForceSource::RecordReplay);
    let linear = run(ForceSource::LinearFit);
    assert_eq!(replay.trace.rows, linear.trace.rows);
    assert_eq!(replay.final_gains, gains);
}
