use nalgebra::Vector3;
use proptest::prelude::*;

use quadflat::control::{
    check_gains, linearization_residual, servo_term, strategy_step, torque_control, AngleReference, ControllerStates,
    GainSet, StrategyKind, TorqueCtlState,
};
use quadflat::rigid_body::{rotor_forces, rotor_mix, BodyParams, ControlInput, RigidState};
use quadflat::sim::{build_reference, flat_initial_state, run_scenario, run_scenario_observed, Scenario, WindProfile, KMH};

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-range..range).prop_map(Vector3::from)
}

fn config() -> ProptestConfig {
    ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn routh_verdict_scale_invariant(kp in 0.0f64..50.0, kd in 0.0f64..50.0, ki in 0.0f64..200.0, a in 0.05f64..20.0) {
        let g = GainSet::uniform(kp, kd, ki);
        prop_assert_eq!(check_gains(&g).map(|v| v.is_stable()), check_gains(&g.time_scaled(a)).map(|v| v.is_stable()));
    }

    #[test]
    fn servo_antisymmetric(e in vec3(1.0), de in vec3(5.0), ie in vec3(1.0)) {
        let g = GainSet::reference_attitude();
        prop_assert_eq!(servo_term(&-e, &-de, &-ie, &g), -servo_term(&e, &de, &ie, &g));
    }

    #[test]
    fn computed_torque_inverts_model(
        attitude in vec3(1.2),
        rates in vec3(3.0),
        ref_attitude in vec3(1.0),
        ref_rate in vec3(2.0),
        ref_accel in vec3(5.0),
        integral in vec3(0.5),
    ) {
        let p = BodyParams::crazyflie();
        let gains = GainSet::uniform(225.0, 30.0, 2.0);
        let state = RigidState { attitude, body_rates: rates, ..Default::default() };
        let reference = AngleReference { attitude: ref_attitude, rate: ref_rate, accel: ref_accel };
        let mut ctl = TorqueCtlState::default();
        ctl.integral = integral;
        let rate = state.euler_rates().unwrap();
        let tau = torque_control(&state.attitude, &rate, &reference, &mut ctl, &gains, &p, 0.01).unwrap();
        let r = linearization_residual(&state, &tau, &reference, &ctl.integral, &gains, &p).unwrap();
        prop_assert!(r.norm() < 1e-10, "{}", r);
    }
}

#[test]
fn first_control_equals_flat_feedforward() {
    let s = Scenario::reference();
    let reference = build_reference(&s, s.control_period).unwrap();
    let r0 = &reference.states[0];
    let state = flat_initial_state(r0).unwrap();
    for kind in StrategyKind::ALL {
        let mut ctl = ControllerStates::new(r0, s.control_period, s.windup_limit);
        let out = strategy_step(kind, &state, r0, r0, &mut ctl, &s.gains, &s.body, s.env.gravity, s.control_period).unwrap();
        assert!((out.input.thrust - r0.thrust).abs() < 1e-9, "{kind}");
        assert!((out.input.torque - r0.torque).abs().max() < 1e-9, "{kind}: {} vs {}", out.input.torque, r0.torque);
    }
}

#[test]
fn zero_gain_rollout_follows_reference() {
    let mut s = Scenario::reference().with_strategy(StrategyKind::FlatAngle);
    s.env = s.env.without_drag();
    s.gains.torque = GainSet::zero();
    s.gains.attitude = GainSet::zero();
    let out = run_scenario(&s).unwrap();
    let last = out.trace.last().unwrap();
    assert!((last.state.position - last.reference_position).norm() < 1e-2);
}

/// Position error of the linearised cascade started from `e(0) = e0` at rest.
/// The outer loop is `e'' + kd e' + kp e + ki ∫e = lag`. With `inner` set,
/// the commanded tilt jumps at t = 0 and the inner loop closes that angle
/// error as `a'' + kd_in a' + kp_in a = 0`, so the first commanded
/// acceleration `kp e0` arrives late by `lag = kp e0 a(t)`. The vertical axis
/// acts through thrust and has no lag.
fn linear_error(outer: [f64; 3], inner: Option<[f64; 2]>, e0: f64, t_end: f64) -> f64 {
    let [kp, kd, ki] = outer;
    let [kp_in, kd_in] = inner.unwrap_or([0.0; 2]);
    let lag0 = if inner.is_some() { kp * e0 } else { 0.0 };
    let f = |x: [f64; 5]| {
        [x[1], x[2], -kd * x[2] - kp * x[1] - ki * x[0] + lag0 * x[3], x[4], -kd_in * x[4] - kp_in * x[3]]
    };
    let add = |a: [f64; 5], b: [f64; 5], s: f64| std::array::from_fn(|i| a[i] + s * b[i]);
    let mut x = [0.0, e0, 0.0, 1.0, 0.0];
    let n = (t_end / 1e-4).round() as usize;
    let h = t_end / n as f64;
    for _ in 0..n {
        let k1 = f(x);
        let k2 = f(add(x, k1, h / 2.0));
        let k3 = f(add(x, k2, h / 2.0));
        let k4 = f(add(x, k3, h));
        for i in 0..5 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    x[1]
}

#[test]
fn position_error_follows_linear_envelope() {
    // Small enough that no rotor limit engages.
    let e0 = Vector3::new(0.005, -0.005, 0.005);
    let nominal = run_scenario(&Scenario::reference()).unwrap();
    let mut s = Scenario::reference();
    s.perturbation.position = -e0;
    let out = run_scenario(&s).unwrap();
    assert_eq!(out.metrics.rate_limit_count + out.metrics.saturation_count, 0);
    let (g, gt) = (s.gains.attitude, s.gains.torque);
    for k in [10, 20, 50, 100, 150, 200, 300, 500, 700, 1000] {
        let (row, base) = (&out.trace[k], &nominal.trace[k]);
        let err = (row.reference_position - row.state.position) - (base.reference_position - base.state.position);
        for axis in 0..3 {
            let inner = (axis < 2).then(|| [gt.kp[1 - axis], gt.kd[1 - axis]]);
            let lin = linear_error([g.kp[axis], g.kd[axis], g.ki[axis]], inner, e0[axis], row.t);
            assert!(
                (err[axis] - lin).abs() < 0.05 * e0[axis].abs(),
                "t {} axis {axis}: {} vs {lin}",
                row.t,
                err[axis]
            );
        }
    }
}

#[test]
fn flat_angle_drifts_in_constant_wind() {
    let s = Scenario::reference().with_strategy(StrategyKind::FlatAngle).with_wind(WindProfile::constant_north_east(25.0 * KMH));
    let out = run_scenario(&s).unwrap();
    let err = |k: usize| (out.trace[k].state.position - out.trace[k].reference_position).norm();
    assert!(err(500) > 0.5 && err(1000) > 2.0 * err(500), "{} {}", err(500), err(1000));
}

#[test]
fn combined_degrades_monotonically_with_wind() {
    let iae: Vec<f64> = [0.0, 5.0, 15.0, 25.0]
        .iter()
        .map(|&kmh| {
            let s = Scenario::reference().with_wind(WindProfile::constant_north_east(kmh * KMH));
            run_scenario(&s).unwrap().metrics.iae
        })
        .collect();
    assert!(iae.windows(2).all(|w| w[0] <= w[1]), "{iae:?}");
}

#[test]
fn hover_hold_stays_put() {
    for kind in StrategyKind::ALL {
        let out = run_scenario(&Scenario::hover(Vector3::new(1.0, -1.0, 3.0), 5.0).with_strategy(kind)).unwrap();
        assert!(out.metrics.iae < 1e-6, "{kind}");
    }
}

#[test]
fn rotor_commands_round_trip_along_run() {
    let s = Scenario::reference();
    let p = s.body;
    let mut worst: f64 = 0.0;
    run_scenario_observed(&s, |rec| {
        let u = rec.output.input;
        let back = rotor_forces(&rotor_mix(&u, &p).unwrap(), &p);
        let scale = ControlInput::new(1.0, Vector3::repeat(1e-3));
        worst = worst
            .max((back.thrust - u.thrust).abs() / scale.thrust)
            .max(((back.torque - u.torque).abs() / scale.torque[0]).max());
    })
    .unwrap();
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn gimbal_lock_aborts_with_timestamp() {
    let mut s = Scenario::reference();
    let pitch = build_reference(&s, s.control_period).unwrap().states[0].attitude[1];
    s.perturbation.attitude = Vector3::new(0.0, std::f64::consts::FRAC_PI_2 - pitch, 0.0);
    let err = run_scenario(&s).unwrap_err();
    assert!(err.to_string().contains("t = 0.000"), "{err}");
}
