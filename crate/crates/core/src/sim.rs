//! Closed-loop rollouts of a flat reference against the rigid-body model.
//!
//! One control decision is taken per control period; the resulting rotor
//! command is clamped to the speed limit, rate limited, mapped back to the
//! realized thrust and torques, and held over a fixed number of RK4 substeps
//! while the wind is re-sampled at every stage.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{strategy_step, ControlError, ControllerGains, ControllerStates, StepOutput, StrategyKind, DEFAULT_WINDUP_LIMIT};
use crate::flat_map::{full_flat_map, FlatError, FlatStateRef};
use crate::rigid_body::{
    body_rate_map, integrate_step_with, rotor_forces, rotor_squares, BodyParams, ControlInput, DynamicsError, EnvParams,
    ParamError, RigidState, RotorSpeeds, WindSample,
};
use crate::spline::{flat_sample_at, sample_times, solve_trajectory, yaw_profile, BSplineCurve, SplineError, WaypointSet, YawProfile};

/// km/h to m/s.
pub const KMH: f64 = 1.0 / 3.6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("trajectory generation failed: {0}")]
    Trajectory(#[from] SplineError),
    #[error("reference at t = {t:.3} s: {source}")]
    Reference { t: f64, source: FlatError },
    #[error("controller aborted at t = {t:.3} s: {source}")]
    Control { t: f64, source: ControlError },
    #[error("integration failed at t = {t:.3} s: {source}")]
    Dynamics { t: f64, source: DynamicsError },
    #[error("state diverged at t = {t:.3} s")]
    Diverged { t: f64 },
    #[error("length mismatch: {times} times, {actual} samples, {reference} reference samples")]
    LengthMismatch { times: usize, actual: usize, reference: usize },
}

/// Time-varying wind along a fixed direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindProfile {
    #[default]
    None,
    Constant { direction: [f64; 3], speed: f64 },
    /// Zero until `start`, linear rise to `peak` over `rise`, constant for
    /// `hold`, linear fall over `fall`.
    RampGust { direction: [f64; 3], peak: f64, start: f64, rise: f64, hold: f64, fall: f64 },
    /// `amplitude * sin(2 pi t / period)`.
    Sinusoidal { direction: [f64; 3], amplitude: f64, period: f64 },
}

impl WindProfile {
    /// Horizontal north-east wind of `speed` m/s.
    pub fn constant_north_east(speed: f64) -> Self {
        WindProfile::Constant { direction: north_east(), speed }
    }

    /// 25 km/h north-east gust: rises over 1 s from t = 2 s, holds 5 s,
    /// falls over 1 s.
    pub fn default_gust() -> Self {
        WindProfile::RampGust { direction: north_east(), peak: 25.0 * KMH, start: 2.0, rise: 1.0, hold: 5.0, fall: 1.0 }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, WindProfile::None)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let (direction, magnitude, timing): (&[f64; 3], f64, Vec<f64>) = match self {
            WindProfile::None => return Ok(()),
            WindProfile::Constant { direction, speed } => (direction, *speed, vec![]),
            WindProfile::RampGust { direction, peak, start, rise, hold, fall } => (direction, *peak, vec![*start, *rise, *hold, *fall]),
            WindProfile::Sinusoidal { direction, amplitude, period } => {
                if !(*period > 0.0) {
                    return Err(SimError::Invalid(format!("wind.period must be positive, got {period}")));
                }
                (direction, *amplitude, vec![])
            }
        };
        let norm = Vector3::from(*direction).norm();
        if !((norm - 1.0).abs() < 1e-9) {
            return Err(SimError::Invalid(format!("wind.direction must be a unit vector, norm is {norm}")));
        }
        if !(magnitude >= 0.0 && magnitude.is_finite()) {
            return Err(SimError::Invalid(format!("wind speed must be nonnegative, got {magnitude}")));
        }
        if let Some(bad) = timing.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(SimError::Invalid(format!("wind timing values must be nonnegative, got {bad}")));
        }
        Ok(())
    }
}

fn north_east() -> [f64; 3] {
    let c = std::f64::consts::FRAC_1_SQRT_2;
    [c, c, 0.0]
}

/// Wind velocity at time `t`.
pub fn wind_sample(profile: &WindProfile, t: f64) -> WindSample {
    let (direction, speed) = match *profile {
        WindProfile::None => return WindSample::calm(),
        WindProfile::Constant { direction, speed } => (direction, speed),
        WindProfile::RampGust { direction, peak, start, rise, hold, fall } => {
            let s = t - start;
            let level = if s <= 0.0 {
                0.0
            } else if s < rise {
                s / rise
            } else if s <= rise + hold {
                1.0
            } else if s < rise + hold + fall {
                1.0 - (s - rise - hold) / fall
            } else {
                0.0
            };
            (direction, peak * level)
        }
        WindProfile::Sinusoidal { direction, amplitude, period } => {
            (direction, amplitude * (std::f64::consts::TAU * t / period).sin())
        }
    };
    WindSample(Vector3::from(direction) * speed)
}

/// Everything a rollout depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub waypoints: WaypointSet,
    /// B-spline order (degree + 1).
    pub spline_order: usize,
    pub control_points: usize,
    /// Yaw at the first and last waypoint, rad.
    pub yaw_start: f64,
    pub yaw_end: f64,
    pub body: BodyParams,
    pub env: EnvParams,
    pub gains: ControllerGains,
    pub strategy: StrategyKind,
    pub wind: WindProfile,
    pub duration: f64,
    pub control_period: f64,
    pub substep: f64,
    /// Added to the exact flat initial state.
    pub perturbation: RigidState,
    pub windup_limit: f64,
}

impl Scenario {
    /// Five-waypoint Crazyflie flight over 10 s with a 0 to 10 degree yaw
    /// sweep, reference gains, Combined strategy and no wind.
    pub fn reference() -> Self {
        let points = vec![
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(0.4, 0.9, 6.0),
            Vector3::new(1.4, 1.2, 6.5),
            Vector3::new(2.0, 0.8, 5.7),
            Vector3::new(1.5, -0.5, 5.0),
        ];
        let times = vec![0.0, 3.0, 5.5, 7.0, 10.0];
        Self {
            waypoints: WaypointSet::new(points, times).expect("static waypoints are valid"),
            spline_order: 6,
            control_points: 12,
            yaw_start: 0.0,
            yaw_end: 10f64.to_radians(),
            body: BodyParams::crazyflie(),
            env: EnvParams::default(),
            gains: ControllerGains::default(),
            strategy: StrategyKind::Combined,
            wind: WindProfile::None,
            duration: 10.0,
            control_period: 0.01,
            substep: 0.001,
            perturbation: RigidState::default(),
            windup_limit: DEFAULT_WINDUP_LIMIT,
        }
    }

    /// Holding `position` for `duration` seconds.
    pub fn hover(position: Vector3<f64>, duration: f64) -> Self {
        Self {
            waypoints: WaypointSet::new(vec![position, position], vec![0.0, duration]).expect("positive duration"),
            duration,
            yaw_end: 0.0,
            ..Self::reference()
        }
    }

    pub fn with_strategy(&self, strategy: StrategyKind) -> Self {
        Self { strategy, ..self.clone() }
    }

    pub fn with_wind(&self, wind: WindProfile) -> Self {
        Self { wind, ..self.clone() }
    }

    /// Number of physics substeps per control period.
    pub fn substeps(&self) -> usize {
        (self.control_period / self.substep).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.body.validate()?;
        self.env.validate()?;
        self.wind.validate()?;
        let span = self.waypoints.end_time() - self.waypoints.start_time();
        if !((span - self.duration).abs() <= 1e-9 * span.max(1.0)) {
            return Err(SimError::Invalid(format!(
                "duration {} does not match the waypoint time span {span}",
                self.duration
            )));
        }
        if !(self.control_period > 0.0 && self.substep > 0.0) {
            return Err(SimError::Invalid("control period and substep must be positive".into()));
        }
        let ratio = self.control_period / self.substep;
        if ratio < 0.5 || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(SimError::Invalid(format!(
                "control period {} is not a multiple of the substep {}",
                self.control_period, self.substep
            )));
        }
        for (name, g) in [("torque", &self.gains.torque), ("attitude", &self.gains.attitude)] {
            if let Some((field, axis, value)) = g.first_invalid() {
                return Err(SimError::Invalid(format!("gains.{name}.{field}[{axis}] must be nonnegative, got {value}")));
            }
        }
        if !(self.windup_limit > 0.0) {
            return Err(SimError::Invalid(format!("windup limit must be positive, got {}", self.windup_limit)));
        }
        if !self.perturbation.is_finite() {
            return Err(SimError::Invalid("initial perturbation must be finite".into()));
        }
        Ok(())
    }
}

/// Fitted curve, yaw channel and the flat references at every control
/// instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub curve: BSplineCurve,
    pub yaw: YawProfile,
    pub states: Vec<FlatStateRef>,
    /// Flat state at the middle of each interval `[states[k].t, states[k+1].t]`.
    pub midpoints: Vec<FlatStateRef>,
}

impl ReferenceTrajectory {
    /// Reference at an arbitrary time inside the curve's domain.
    pub fn at(&self, t: f64, p: &BodyParams, gravity: f64) -> Result<FlatStateRef, SimError> {
        let s = flat_sample_at(&self.curve, &self.yaw, t)?;
        full_flat_map(&s, p, gravity).map_err(|source| SimError::Reference { t, source })
    }
}

/// Solves the trajectory problem and maps it through the flatness relations
/// at every `dt`.
pub fn build_reference(s: &Scenario, dt: f64) -> Result<ReferenceTrajectory, SimError> {
    let curve = solve_trajectory(&s.waypoints, s.spline_order, s.control_points)?;
    let (t0, tn) = curve.domain();
    let yaw = yaw_profile(s.yaw_start, s.yaw_end, t0, tn);
    let map = |t: f64| {
        let sample = flat_sample_at(&curve, &yaw, t)?;
        full_flat_map(&sample, &s.body, s.env.gravity).map_err(|source| SimError::Reference { t, source })
    };
    let times = sample_times(t0, tn, dt)?;
    let states = times.iter().map(|&t| map(t)).collect::<Result<Vec<_>, _>>()?;
    let midpoints = times.windows(2).map(|w| map(0.5 * (w[0] + w[1]))).collect::<Result<Vec<_>, _>>()?;
    Ok(ReferenceTrajectory { curve, yaw, states, midpoints })
}

/// The state the reference prescribes, rates expressed in the body frame.
pub fn flat_initial_state(r: &FlatStateRef) -> Result<RigidState, DynamicsError> {
    let (w, _) = body_rate_map(&r.attitude)?;
    Ok(RigidState { position: r.position, velocity: r.velocity, attitude: r.attitude, body_rates: w * r.attitude_rate })
}

fn perturbed(base: RigidState, d: &RigidState) -> RigidState {
    RigidState {
        position: base.position + d.position,
        velocity: base.velocity + d.velocity,
        attitude: base.attitude + d.attitude,
        body_rates: base.body_rates + d.body_rates,
    }
}

/// One sample of a rollout, taken at a control instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub state: RigidState,
    pub reference_position: Vector3<f64>,
    pub reference_attitude: Vector3<f64>,
    /// Thrust and torques realized by the rotors over the following period.
    pub applied: ControlInput,
    pub rotors: RotorSpeeds,
    pub wind: Vector3<f64>,
}

/// Column names of the trace CSV.
pub const TRACE_HEADER: [&str; 26] = [
    "t", "x", "y", "z", "vx", "vy", "vz", "phi", "theta", "psi", "wx", "wy", "wz", "T", "tau_phi", "tau_theta", "tau_psi",
    "ref_x", "ref_y", "ref_z", "ref_phi", "ref_theta", "ref_psi", "wind_x", "wind_y", "wind_z",
];

impl TraceRow {
    /// Values in [`TRACE_HEADER`] order.
    pub fn fields(&self) -> [f64; 26] {
        let s = &self.state;
        let mut out = [0.0; 26];
        out[0] = self.t;
        let groups: [&Vector3<f64>; 4] = [&s.position, &s.velocity, &s.attitude, &s.body_rates];
        for (g, v) in groups.iter().enumerate() {
            out[1 + 3 * g..4 + 3 * g].copy_from_slice(v.as_slice());
        }
        out[13] = self.applied.thrust;
        out[14..17].copy_from_slice(self.applied.torque.as_slice());
        out[17..20].copy_from_slice(self.reference_position.as_slice());
        out[20..23].copy_from_slice(self.reference_attitude.as_slice());
        out[23..26].copy_from_slice(self.wind.as_slice());
        out
    }
}

/// Summary of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// Integral of the position error norm, m·s.
    pub iae: f64,
    pub max_position_error: f64,
    /// Largest angle between the thrust axis and vertical, rad.
    pub max_tilt: f64,
    /// Control periods in which a rotor command hit the speed bounds.
    pub saturation_count: usize,
    /// Control periods in which a rotor command hit the rate limit.
    pub rate_limit_count: usize,
    pub max_rotor_speed: f64,
    /// Largest rotor speed change between consecutive periods over the
    /// period length, rad/s².
    pub max_rotor_accel: f64,
}

/// Trapezoidal integral of `|reference - actual|` over `times`.
pub fn compute_iae(times: &[f64], actual: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<f64, SimError> {
    if times.len() != actual.len() || times.len() != reference.len() {
        return Err(SimError::LengthMismatch { times: times.len(), actual: actual.len(), reference: reference.len() });
    }
    let err: Vec<f64> = actual.iter().zip(reference).map(|(a, r)| (r - a).norm()).collect();
    Ok(times.windows(2).zip(err.windows(2)).map(|(t, e)| 0.5 * (t[1] - t[0]) * (e[0] + e[1])).sum())
}

fn metrics(rows: &[TraceRow], saturation_count: usize, rate_limit_count: usize, period: f64) -> Metrics {
    let times: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let actual: Vec<_> = rows.iter().map(|r| r.state.position).collect();
    let reference: Vec<_> = rows.iter().map(|r| r.reference_position).collect();
    let iae = compute_iae(&times, &actual, &reference).unwrap_or(f64::NAN);
    let max_position_error = actual.iter().zip(&reference).map(|(a, r)| (r - a).norm()).fold(0.0, f64::max);
    let max_tilt = rows
        .iter()
        .map(|r| (r.state.attitude[0].cos() * r.state.attitude[1].cos()).clamp(-1.0, 1.0).acos())
        .fold(0.0, f64::max);
    let max_rotor_speed = rows.iter().map(|r| r.rotors.max()).fold(0.0, f64::max);
    let max_rotor_accel = rows
        .windows(2)
        .flat_map(|w| (0..4).map(move |i| (w[1].rotors.0[i] - w[0].rotors.0[i]).abs() / period))
        .fold(0.0, f64::max);
    Metrics { iae, max_position_error, max_tilt, saturation_count, rate_limit_count, max_rotor_speed, max_rotor_accel }
}

/// What the controller saw and decided at one control instant.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord<'a> {
    pub t: f64,
    pub measured: &'a RigidState,
    pub reference: &'a FlatStateRef,
    /// Reference at the middle of the hold interval.
    pub feedforward: &'a FlatStateRef,
    pub output: &'a StepOutput,
    pub controller: &'a ControllerStates,
    /// Input after rotor saturation and rate limiting.
    pub applied: &'a ControlInput,
}

/// Result of [`run_scenario`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub reference: ReferenceTrajectory,
    pub trace: Vec<TraceRow>,
    pub metrics: Metrics,
}

/// Closed-loop rollout of `s`.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput, SimError> {
    run_scenario_observed(s, |_| {})
}

/// [`run_scenario`] calling `observe` after every control decision.
pub fn run_scenario_observed<F>(s: &Scenario, mut observe: F) -> Result<RunOutput, SimError>
where
    F: FnMut(&StepRecord<'_>),
{
    s.validate()?;
    let reference = build_reference(s, s.control_period)?;
    let p = &s.body;
    let g = s.env.gravity;
    let refs = &reference.states;
    let first = &refs[0];

    let mut state = perturbed(
        flat_initial_state(first).map_err(|source| SimError::Dynamics { t: first.t, source })?,
        &s.perturbation,
    );
    let feedforward = reference.midpoints.first().unwrap_or(first);
    let mut ctl = ControllerStates::new(feedforward, s.control_period, s.windup_limit);
    let (mut rotors, _) = RotorSpeeds::from_squares_clamped(
        rotor_squares(&ControlInput::new(feedforward.thrust, feedforward.torque), p),
        p.max_rotor_speed,
    );
    let n_sub = s.substeps();
    let max_step = p.max_rotor_accel * s.control_period;
    let mut trace = Vec::with_capacity(refs.len());
    let (mut saturations, mut rate_limits) = (0, 0);
    let mut applied = ControlInput::new(feedforward.thrust, feedforward.torque);

    for (k, r) in refs.iter().enumerate() {
        let t = r.t;
        if k + 1 == refs.len() {
            trace.push(TraceRow {
                t,
                state,
                reference_position: r.position,
                reference_attitude: r.attitude,
                applied,
                rotors,
                wind: wind_sample(&s.wind, t).0,
            });
            break;
        }
        let ff = &reference.midpoints[k];
        let out = strategy_step(s.strategy, &state, r, ff, &mut ctl, &s.gains, p, g, s.control_period)
            .map_err(|source| SimError::Control { t, source })?;
        let (clamped, saturated) = RotorSpeeds::from_squares_clamped(rotor_squares(&out.input, p), p.max_rotor_speed);
        let (limited, rate_hit) = clamped.rate_limited(&rotors, max_step);
        saturations += saturated as usize;
        rate_limits += rate_hit as usize;
        rotors = limited;
        applied = rotor_forces(&rotors, p);
        observe(&StepRecord { t, measured: &state, reference: r, feedforward: ff, output: &out, controller: &ctl, applied: &applied });
        trace.push(TraceRow {
            t,
            state,
            reference_position: r.position,
            reference_attitude: r.attitude,
            applied,
            rotors,
            wind: wind_sample(&s.wind, t).0,
        });

        let h = (refs[k + 1].t - t) / n_sub as f64;
        for j in 0..n_sub {
            let tj = t + j as f64 * h;
            state = integrate_step_with(&state, tj, h, p, &s.env, |tau| (applied, wind_sample(&s.wind, tau)))
                .map_err(|source| SimError::Dynamics { t: tj, source })?;
        }
        if !state.is_finite() {
            return Err(SimError::Diverged { t: refs[k + 1].t });
        }
    }

    let metrics = metrics(&trace, saturations, rate_limits, s.control_period);
    Ok(RunOutput { reference, trace, metrics })
}

/// Worst deviations of an open-loop rollout from its reference.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OpenLoopReport {
    pub max_position_error: f64,
    pub max_attitude_error: f64,
    pub final_position_error: f64,
}

/// Drives the model with the flat thrust and torques evaluated continuously
/// (at every RK4 stage), starting from the exact flat initial state, without
/// any feedback. Deviations are checked at every substep.
pub fn open_loop_rollout(s: &Scenario) -> Result<OpenLoopReport, SimError> {
    s.validate()?;
    let p = &s.body;
    let g = s.env.gravity;
    let curve = solve_trajectory(&s.waypoints, s.spline_order, s.control_points)?;
    let (t0, tn) = curve.domain();
    let reference =
        ReferenceTrajectory { yaw: yaw_profile(s.yaw_start, s.yaw_end, t0, tn), curve, states: Vec::new(), midpoints: Vec::new() };

    // RK4 asks for each step's start, midpoint (twice) and end; the end is
    // the next step's start. Remember the last few evaluations.
    let cache = std::cell::RefCell::new(Vec::<(f64, FlatStateRef)>::with_capacity(3));
    let at = |tau: f64| -> Result<FlatStateRef, SimError> {
        let tau = tau.min(tn);
        if let Some((_, r)) = cache.borrow().iter().find(|(t, _)| *t == tau) {
            return Ok(*r);
        }
        let r = reference.at(tau, p, g)?;
        let mut c = cache.borrow_mut();
        if c.len() == 3 {
            c.remove(0);
        }
        c.push((tau, r));
        Ok(r)
    };

    let first = at(t0)?;
    let mut state = flat_initial_state(&first).map_err(|source| SimError::Dynamics { t: t0, source })?;
    let times = sample_times(t0, tn, s.substep)?;
    let failure = std::cell::Cell::new(None);
    let mut report = OpenLoopReport::default();
    for w in times.windows(2) {
        let inputs = |tau: f64| match at(tau) {
            Ok(r) => (ControlInput::new(r.thrust, r.torque), wind_sample(&s.wind, tau)),
            Err(e) => {
                failure.set(Some(e));
                (ControlInput::default(), WindSample::calm())
            }
        };
        state = integrate_step_with(&state, w[0], w[1] - w[0], p, &s.env, inputs)
            .map_err(|source| SimError::Dynamics { t: w[0], source })?;
        if let Some(e) = failure.take() {
            return Err(e);
        }
        let r = at(w[1])?;
        let pos_err = (r.position - state.position).norm();
        report.max_position_error = report.max_position_error.max(pos_err);
        report.max_attitude_error = report.max_attitude_error.max((r.attitude - state.attitude).abs().max());
        report.final_position_error = pos_err;
    }
    Ok(report)
}
