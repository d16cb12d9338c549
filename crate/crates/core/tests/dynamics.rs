use std::f64::consts::PI;

use lyt_core::dynamics::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(system: System, dt: f64) -> SystemSpec {
    SystemSpec::new(system, dt).unwrap()
}

fn max_relative_energy_drift(system: &System, traj: &StateTrajectory) -> f64 {
    let e0 = energy(system, traj.state(0)).unwrap();
    (0..traj.len())
        .map(|i| (energy(system, traj.state(i)).unwrap() - e0).abs() / e0.abs())
        .fold(0.0, f64::max)
}

#[test]
fn circle_invariant_holds_for_random_times() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let t = rand::Rng::random_range(&mut rng, -100.0..100.0);
        let [x, y] = circular_state(t, 1.7, 2.5);
        assert!(((x * x + y * y).sqrt() - 2.5).abs() < 1e-12);
    }
    let [x, y] = circular_state(PI / 1.7, 1.7, 2.5);
    assert!((x + 2.5).abs() < 1e-12 && y.abs() < 1e-12);
}

#[test]
fn simulated_circle_matches_closed_form() {
    let s = SystemSpec::default_for(SystemKind::CircularMotion);
    let traj = simulate(&s, &[1.0, 0.0], 2000).unwrap();
    for i in (0..traj.len()).step_by(97) {
        let [x, y] = circular_state(traj.times[i], PI, 1.0);
        assert!((traj.state(i)[0] - x).abs() < 1e-12);
        assert!((traj.state(i)[1] - y).abs() < 1e-12);
    }
}

#[test]
fn rk4_constant_field_is_constant() {
    let out = rk4(
        |_, d| {
            d.fill(0.0);
            Ok(())
        },
        &[1.5, -2.0],
        0.1,
        10,
    )
    .unwrap();
    assert!(out.chunks(2).all(|c| c == [1.5, -2.0]));
}

#[test]
fn rk4_exponential_reaches_e() {
    let out = rk4(
        |s, d| {
            d[0] = s[0];
            Ok(())
        },
        &[1.0],
        0.01,
        100,
    )
    .unwrap();
    assert_eq!(out.len(), 101);
    assert!((out[100] - std::f64::consts::E).abs() < 1e-8, "{}", out[100]);
}

#[test]
fn rk4_is_fourth_order_on_pendulum() {
    let horizon = 2.0;
    let init = [1.0, 0.0];
    let end_theta = |dt: f64| {
        let steps = (horizon / dt).round() as usize;
        let traj = integrate_rk4(&spec(System::default_for(SystemKind::SinglePendulum), dt), &init, steps)
            .unwrap();
        traj.state(traj.len() - 1)[0]
    };
    let dt = 0.04;
    let reference = end_theta(dt / 16.0);
    let e1 = (end_theta(dt) - reference).abs();
    let e2 = (end_theta(dt / 2.0) - reference).abs();
    let ratio = e1 / e2;
    assert!((12.0..20.0).contains(&ratio), "error ratio {ratio}");
}

#[test]
fn small_angle_period_matches_linear_theory() {
    let (g, length) = (9.81, 1.0);
    let s = spec(System::SinglePendulum { g, length }, 1e-3);
    let traj = integrate_rk4(&s, &[0.01, 0.0], 20_000).unwrap();
    // Upward zero crossings of θ, located by linear interpolation.
    let mut crossings = Vec::new();
    for i in 1..traj.len() {
        let (a, b) = (traj.state(i - 1)[0], traj.state(i)[0]);
        if a < 0.0 && b >= 0.0 {
            let frac = a / (a - b);
            crossings.push(traj.times[i - 1] + frac * s.dt);
        }
    }
    assert!(crossings.len() >= 3);
    let period = (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;
    let expected = 2.0 * PI * (length / g).sqrt();
    assert!(((period - expected) / expected).abs() < 1e-3, "{period} vs {expected}");
}

#[test]
fn pendulum_family_conserves_energy() {
    let cases = [
        (System::default_for(SystemKind::SinglePendulum), vec![1.2, 0.5]),
        (System::default_for(SystemKind::DoublePendulum), vec![2.0, 2.0, 0.0, 0.0]),
        (System::default_for(SystemKind::DoublePendulum), vec![0.7, -0.4, 0.3, 0.1]),
        (System::default_for(SystemKind::ElasticPendulum), vec![1.3, 0.6, 0.1, -0.4]),
    ];
    for (system, init) in cases {
        let traj = integrate_rk4(&spec(system.clone(), 1e-3), &init, 10_000).unwrap();
        let drift = max_relative_energy_drift(&system, &traj);
        assert!(drift < 1e-6, "{:?}: drift {drift}", system.kind());
    }
}

#[test]
fn double_pendulum_is_chaotic() {
    let s = spec(System::default_for(SystemKind::DoublePendulum), 1e-3);
    let a = integrate_rk4(&s, &[2.0, 2.0, 0.0, 0.0], 20_000).unwrap();
    let b = integrate_rk4(&s, &[2.0 + 1e-8, 2.0, 0.0, 0.0], 20_000).unwrap();
    let max_gap = (0..a.len())
        .map(|i| (a.state(i)[0] - b.state(i)[0]).abs())
        .fold(0.0, f64::max);
    assert!(max_gap > 1e-2, "max gap {max_gap}");
}

#[test]
fn elastic_radial_mode_keeps_theta_zero() {
    let s = spec(System::default_for(SystemKind::ElasticPendulum), 1e-3);
    let traj = integrate_rk4(&s, &[1.4, 0.0, 0.2, 0.0], 5_000).unwrap();
    for i in 0..traj.len() {
        assert!(traj.state(i)[1].abs() < 1e-10);
        assert!(traj.state(i)[3].abs() < 1e-10);
    }
}

#[test]
fn elastic_collapse_aborts_with_singularity() {
    let s = spec(
        System::ElasticPendulum { g: 9.81, mass: 1.0, stiffness: 40.0, rest_length: 1.0 },
        1e-3,
    );
    let err = integrate_rk4(&s, &[0.05, 0.0, -5.0, 0.0], 1000).unwrap_err();
    assert!(matches!(err, DynamicsError::Singularity { .. }), "{err}");
}

fn rd_model(n: usize) -> GrayScott {
    GrayScott { feed: 0.037, kill: 0.06, diff_u: 0.16, diff_v: 0.08, height: n, width: n }
}

#[test]
fn gray_scott_stays_bounded_for_long_runs() {
    let model = rd_model(32);
    let s = spec(System::ReactionDiffusion { model, time_scale: 100.0 }, 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let init = s.sample_initial_state(&mut rng);
    let traj = simulate(&s, &init, 5000).unwrap();
    let last = traj.state(traj.len() - 1);
    assert!(traj.states.iter().all(|&x| (-1e-12..=1.2).contains(&x)));
    // Non-trivial pattern persists.
    let v_mean: f64 = last[1024..].iter().sum::<f64>() / 1024.0;
    assert!(v_mean > 1e-3, "pattern died out: {v_mean}");
}

#[test]
fn gray_scott_mass_change_equals_reaction_integral() {
    let model = rd_model(16);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u: Vec<f64> = (0..256).map(|_| rand::Rng::random_range(&mut rng, 0.3..1.0)).collect();
    let v: Vec<f64> = (0..256).map(|_| rand::Rng::random_range(&mut rng, 0.0..0.4)).collect();
    let dt = 0.9;
    let (nu, nv) = reaction_diffusion_step(&u, &v, &model, dt).unwrap();
    let (mut react_u, mut react_v) = (0.0, 0.0);
    for i in 0..256 {
        let uvv = u[i] * v[i] * v[i];
        react_u += -uvv + model.feed * (1.0 - u[i]);
        react_v += uvv - (model.feed + model.kill) * v[i];
    }
    let du: f64 = nu.iter().sum::<f64>() - u.iter().sum::<f64>();
    let dv: f64 = nv.iter().sum::<f64>() - v.iter().sum::<f64>();
    assert!((du - dt * react_u).abs() < 1e-8);
    assert!((dv - dt * react_v).abs() < 1e-8);
}

#[test]
fn gray_scott_rejects_unstable_step() {
    let model = rd_model(8);
    let err = reaction_diffusion_step(&[1.0; 64], &[0.0; 64], &model, 1.6).unwrap_err();
    assert!(matches!(err, DynamicsError::Config(_)));
}

#[test]
fn trajectories_are_deterministic() {
    for kind in [
        SystemKind::CircularMotion,
        SystemKind::SinglePendulum,
        SystemKind::DoublePendulum,
        SystemKind::ElasticPendulum,
        SystemKind::ReactionDiffusion,
    ] {
        let mut s = SystemSpec::default_for(kind);
        if kind == SystemKind::ReactionDiffusion {
            s.system = System::ReactionDiffusion { model: rd_model(8), time_scale: 100.0 };
        }
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let init = s.sample_initial_state(&mut rng);
            simulate(&s, &init, 200).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.states.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   b.states.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(observables(&s.system, a.state(0)).len(), kind.ground_truth_dim());
    }
}

#[test]
fn times_are_uniform() {
    let s = SystemSpec::default_for(SystemKind::SinglePendulum);
    let traj = simulate(&s, &[0.3, 0.0], 10_000).unwrap();
    for w in traj.times.windows(2) {
        assert!(w[1] > w[0]);
        assert!((w[1] - w[0] - s.dt).abs() < 1e-12);
    }
}

#[test]
fn spec_round_trips_through_json() {
    let s = SystemSpec::default_for(SystemKind::ElasticPendulum);
    let text = serde_json::to_string(&s).unwrap();
    assert!(text.contains("\"kind\":\"elastic_pendulum\""));
    let back: SystemSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, s);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pendulum_energy_drift_small_for_random_starts(theta in -2.5f64..2.5, omega in -2.0f64..2.0) {
        prop_assume!(theta.abs() + omega.abs() > 0.05);
        let system = System::default_for(SystemKind::SinglePendulum);
        let traj = integrate_rk4(&spec(system.clone(), 1e-3), &[theta, omega], 2000).unwrap();
        prop_assert!(max_relative_energy_drift(&system, &traj) < 1e-6);
    }

    #[test]
    fn gray_scott_step_preserves_positivity(seed in 0u64..1000) {
        let model = rd_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..64).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        let v: Vec<f64> = (0..64).map(|_| rand::Rng::random_range(&mut rng, 0.0..0.5)).collect();
        let (nu, nv) = reaction_diffusion_step(&u, &v, &model, 1.0).unwrap();
        prop_assert!(nu.iter().chain(&nv).all(|&x| x >= -1e-12));
    }
}
