//! Tracking controllers built on feedback linearization.
//!
//! The torque controller inverts the rotational dynamics
//! `M(eta) eta'' + V(eta, eta') = tau` so the angle error obeys
//! `e'' + Kd e' + Kp e + Ki ∫e = 0`. The attitude controller shapes a
//! commanded acceleration from the position error and its integral, then maps
//! it through the flat roll/pitch/thrust relations, which linearizes the
//! translational error dynamics the same way.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::flat_map::{attitude_from_thrust_axis, FlatError, FlatStateRef};
use crate::rigid_body::{
    body_rate_map, body_rate_map_derivative, euler_dynamics_terms, BodyParams, ControlInput, DynamicsError, Euler,
    RigidState,
};

/// Default magnitude bound on every integrator channel.
pub const DEFAULT_WINDUP_LIMIT: f64 = 10.0;

/// Diagonal PID-style gains, one entry per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSet {
    pub kp: [f64; 3],
    pub kd: [f64; 3],
    pub ki: [f64; 3],
}

impl GainSet {
    pub fn uniform(kp: f64, kd: f64, ki: f64) -> Self {
        Self { kp: [kp; 3], kd: [kd; 3], ki: [ki; 3] }
    }

    pub fn zero() -> Self {
        Self::uniform(0.0, 0.0, 0.0)
    }

    /// Inner-loop gains of the reference tuning.
    pub fn reference_torque() -> Self {
        Self::uniform(225.0, 30.0, 0.0)
    }

    /// Outer-loop gains of the reference tuning.
    pub fn reference_attitude() -> Self {
        Self { kp: [25.0, 25.0, 9.0], kd: [10.0, 10.0, 6.0], ki: [1.0, 1.0, 0.3] }
    }

    pub fn kp(&self) -> Vector3<f64> {
        Vector3::from(self.kp)
    }

    pub fn kd(&self) -> Vector3<f64> {
        Vector3::from(self.kd)
    }

    pub fn ki(&self) -> Vector3<f64> {
        Vector3::from(self.ki)
    }

    /// Gains of the time-scaled error dynamics `t -> t / a`.
    pub fn time_scaled(&self, a: f64) -> Self {
        Self {
            kp: self.kp.map(|k| k * a * a),
            kd: self.kd.map(|k| k * a),
            ki: self.ki.map(|k| k * a * a * a),
        }
    }

    /// Index and value of the first negative or non-finite gain.
    pub fn first_invalid(&self) -> Option<(&'static str, usize, f64)> {
        [("kp", &self.kp), ("kd", &self.kd), ("ki", &self.ki)]
            .into_iter()
            .flat_map(|(name, v)| v.iter().enumerate().map(move |(i, &k)| (name, i, k)))
            .find(|(_, _, k)| !(k.is_finite() && *k >= 0.0))
    }
}

/// Stability of `s³ + Kd s² + Kp s + Ki` for one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisStability {
    /// All three gains positive and `Kp Kd > Ki`.
    Stable,
    /// `Ki = 0`, second-order loop `s² + Kd s + Kp` with `Kp, Kd > 0`.
    StableWithoutIntegral,
    Unstable,
}

impl AxisStability {
    pub fn is_stable(self) -> bool {
        self != AxisStability::Unstable
    }
}

/// Routh–Hurwitz verdict per axis.
pub fn check_gains(g: &GainSet) -> [AxisStability; 3] {
    std::array::from_fn(|i| {
        let (kp, kd, ki) = (g.kp[i], g.kd[i], g.ki[i]);
        if ki == 0.0 {
            if kp > 0.0 && kd > 0.0 {
                AxisStability::StableWithoutIntegral
            } else {
                AxisStability::Unstable
            }
        } else if kp > 0.0 && kd > 0.0 && ki > 0.0 && kp * kd > ki {
            AxisStability::Stable
        } else {
            AxisStability::Unstable
        }
    })
}

pub fn gains_stable(g: &GainSet) -> bool {
    check_gains(g).iter().all(|a| a.is_stable())
}

/// Angle reference with its first two time derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AngleReference {
    pub attitude: Euler,
    pub rate: Euler,
    pub accel: Euler,
}

impl AngleReference {
    pub fn from_flat(r: &FlatStateRef) -> Self {
        Self { attitude: r.attitude, rate: r.attitude_rate, accel: r.attitude_accel }
    }
}

fn clamp_channels(v: Vector3<f64>, limit: f64) -> Vector3<f64> {
    v.map(|x| x.clamp(-limit, limit))
}

/// Integrator of the torque controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorqueCtlState {
    /// `∫ e_eta dt`, rad·s.
    pub integral: Vector3<f64>,
    last_error: Option<Vector3<f64>>,
    pub windup_limit: f64,
}

impl Default for TorqueCtlState {
    fn default() -> Self {
        Self::new(DEFAULT_WINDUP_LIMIT)
    }
}

impl TorqueCtlState {
    pub fn new(windup_limit: f64) -> Self {
        Self { integral: Vector3::zeros(), last_error: None, windup_limit }
    }

    fn accumulate(&mut self, error: Vector3<f64>, dt: f64) {
        if let Some(prev) = self.last_error {
            self.integral = clamp_channels(self.integral + (prev + error) * (0.5 * dt), self.windup_limit);
        }
        self.last_error = Some(error);
    }
}

/// `Kd e' + Kp e + Ki ∫e`.
pub fn servo_term(error: &Vector3<f64>, error_rate: &Vector3<f64>, integral: &Vector3<f64>, g: &GainSet) -> Vector3<f64> {
    g.kd().component_mul(error_rate) + g.kp().component_mul(error) + g.ki().component_mul(integral)
}

/// Computed-torque law `tau = M(eta) (eta_ref'' + servo) + V(eta, eta')`.
///
/// `attitude_rate` is the measured Euler rate (`W^-1 omega_B`). Updates the
/// integrator in `ctl` with the current error before using it.
pub fn torque_control(
    attitude: &Euler,
    attitude_rate: &Euler,
    reference: &AngleReference,
    ctl: &mut TorqueCtlState,
    gains: &GainSet,
    p: &BodyParams,
    dt: f64,
) -> Result<Vector3<f64>, DynamicsError> {
    let error = reference.attitude - attitude;
    let error_rate = reference.rate - attitude_rate;
    ctl.accumulate(error, dt);
    let commanded = reference.accel + servo_term(&error, &error_rate, &ctl.integral, gains);
    let (m, v) = euler_dynamics_terms(p, attitude, attitude_rate)?;
    Ok(m * commanded + v)
}

/// `e'' + Kd e' + Kp e + Ki ∫e` for the angle error, with `e''` taken from
/// the rigid-body response to `torque` at `state`. Zero up to rounding when
/// `torque` came from [`torque_control`] on the same model.
pub fn linearization_residual(
    state: &RigidState,
    torque: &Vector3<f64>,
    reference: &AngleReference,
    integral: &Vector3<f64>,
    gains: &GainSet,
    p: &BodyParams,
) -> Result<Vector3<f64>, DynamicsError> {
    let (_, w_inv) = body_rate_map(&state.attitude)?;
    let inertia = p.inertia_vec();
    let omega = state.body_rates;
    let omega_dot = (torque - omega.cross(&inertia.component_mul(&omega))).component_div(&inertia);
    let rate = w_inv * omega;
    let accel = w_inv * (omega_dot - body_rate_map_derivative(&state.attitude, &rate) * rate);

    let error = reference.attitude - state.attitude;
    let error_rate = reference.rate - rate;
    let error_accel = reference.accel - accel;
    Ok(error_accel + servo_term(&error, &error_rate, integral, gains))
}

/// Single, double and triple integrals of the position error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeCtlState {
    pub integrals: [Vector3<f64>; 3],
    last: Option<[Vector3<f64>; 3]>,
    pub windup_limit: f64,
}

impl Default for AttitudeCtlState {
    fn default() -> Self {
        Self::new(DEFAULT_WINDUP_LIMIT)
    }
}

impl AttitudeCtlState {
    pub fn new(windup_limit: f64) -> Self {
        Self { integrals: [Vector3::zeros(); 3], last: None, windup_limit }
    }

    fn accumulate(&mut self, error: Vector3<f64>, dt: f64) {
        if let Some([e0, i1, i2]) = self.last {
            let h = 0.5 * dt;
            let lim = self.windup_limit;
            let n1 = clamp_channels(self.integrals[0] + (e0 + error) * h, lim);
            let n2 = clamp_channels(self.integrals[1] + (i1 + n1) * h, lim);
            let n3 = clamp_channels(self.integrals[2] + (i2 + n2) * h, lim);
            self.integrals = [n1, n2, n3];
        }
        self.last = Some([error, self.integrals[0], self.integrals[1]]);
    }
}

/// Output of the attitude controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeCommand {
    pub thrust: f64,
    pub attitude: Euler,
    /// Second derivative of the corrected position.
    pub accel: Vector3<f64>,
    /// Reference position shifted by the weighted error integrals.
    pub corrected_position: Vector3<f64>,
}

/// Feedback-linearizing position loop.
///
/// The corrected reference is `ξ* = ξ_ref + Kd ∫e + Kp ∫∫e + Ki ∫∫∫e`; its
/// second derivative `ξ_ref'' + Kd e' + Kp e + Ki ∫e` is mapped through the
/// flat roll/pitch/thrust relations with yaw parameter `yaw_param`.
#[allow(clippy::too_many_arguments)]
pub fn attitude_control(
    position: &Vector3<f64>,
    velocity: &Vector3<f64>,
    reference: &FlatStateRef,
    yaw_param: f64,
    ctl: &mut AttitudeCtlState,
    gains: &GainSet,
    mass: f64,
    gravity: f64,
    dt: f64,
) -> Result<AttitudeCommand, FlatError> {
    let error = reference.position - position;
    let error_rate = reference.velocity - velocity;
    ctl.accumulate(error, dt);
    let [i1, i2, i3] = ctl.integrals;
    let accel = reference.acceleration + servo_term(&error, &error_rate, &i1, gains);
    let axis = accel + Vector3::new(0.0, 0.0, gravity);
    if !(axis[2] > 0.0) {
        return Err(FlatError::DegenerateAcceleration { t: reference.t, vertical: axis[2] });
    }
    let corrected_position =
        reference.position + gains.kd().component_mul(&i1) + gains.kp().component_mul(&i2) + gains.ki().component_mul(&i3);
    Ok(AttitudeCommand {
        thrust: mass * axis.norm(),
        attitude: attitude_from_thrust_axis(&axis, yaw_param),
        accel,
        corrected_position,
    })
}

/// Causal rate and acceleration estimate of a sampled angle reference from
/// second-order backward differences over the last three samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRateEstimator {
    /// `[eta_{k-1}, eta_{k-2}]`, empty before the first sample.
    history: Option<[Euler; 2]>,
    initial_rate: Euler,
    initial_accel: Euler,
    period: f64,
}

impl ReferenceRateEstimator {
    /// The first sample returns `initial`'s rate and acceleration whatever
    /// its angle is; the history behind it is the backward Taylor expansion
    /// through that sample. A feedback correction already present at the
    /// first instant therefore does not show up as a step.
    pub fn new(initial: &AngleReference, period: f64) -> Self {
        Self { history: None, initial_rate: initial.rate, initial_accel: initial.accel, period }
    }

    pub fn update(&mut self, attitude: Euler) -> AngleReference {
        let h = self.period;
        let [prev, prev2] = self.history.unwrap_or_else(|| {
            let back = |k: f64| attitude - self.initial_rate * (k * h) + self.initial_accel * (0.5 * k * k * h * h);
            [back(1.0), back(2.0)]
        });
        let rate = (attitude * 3.0 - prev * 4.0 + prev2) / (2.0 * h);
        let accel = (attitude - prev * 2.0 + prev2) / (h * h);
        self.history = Some([attitude, prev]);
        AngleReference { attitude, rate, accel }
    }
}

/// Which loops use feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Flat thrust and angles fed to the torque controller; position open loop.
    FlatAngle,
    /// Attitude controller with torques from the open-loop rotational model.
    FlatPosition,
    /// Attitude controller feeding the torque controller.
    Combined,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::FlatAngle, StrategyKind::FlatPosition, StrategyKind::Combined];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FlatAngle => "flat_angle",
            StrategyKind::FlatPosition => "flat_position",
            StrategyKind::Combined => "combined",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected flat_angle, flat_position or combined)"))
    }
}

/// Inner and outer loop gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub torque: GainSet,
    pub attitude: GainSet,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self { torque: GainSet::reference_torque(), attitude: GainSet::reference_attitude() }
    }
}

/// Mutable controller memory for one rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerStates {
    pub torque: TorqueCtlState,
    pub attitude: AttitudeCtlState,
    pub reference_rates: ReferenceRateEstimator,
}

impl ControllerStates {
    pub fn new(initial: &FlatStateRef, period: f64, windup_limit: f64) -> Self {
        Self {
            torque: TorqueCtlState::new(windup_limit),
            attitude: AttitudeCtlState::new(windup_limit),
            reference_rates: ReferenceRateEstimator::new(&AngleReference::from_flat(initial), period),
        }
    }
}

/// What a strategy decided at one control instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub input: ControlInput,
    /// Angle reference handed to the inner loop (or open-loop torque model).
    pub angle_ref: AngleReference,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error(transparent)]
    Flat(#[from] FlatError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// One control decision of the selected strategy.
///
/// Errors are formed against `reference`, the flat state at the sampling
/// instant. Open-loop terms (flat thrust, angle and position accelerations)
/// come from `feedforward`; passing the flat state at the middle of the
/// interval over which the command is held removes the half-period lag of a
/// zero-order hold. Passing `reference` twice gives the plain sampled law.
#[allow(clippy::too_many_arguments)]
pub fn strategy_step(
    kind: StrategyKind,
    measured: &RigidState,
    reference: &FlatStateRef,
    feedforward: &FlatStateRef,
    states: &mut ControllerStates,
    gains: &ControllerGains,
    p: &BodyParams,
    gravity: f64,
    dt: f64,
) -> Result<StepOutput, ControlError> {
    let measured_rate = measured.euler_rates()?;
    let inner = |angle_ref: &AngleReference, states: &mut ControllerStates| {
        torque_control(&measured.attitude, &measured_rate, angle_ref, &mut states.torque, &gains.torque, p, dt)
    };
    match kind {
        StrategyKind::FlatAngle => {
            let angle_ref = AngleReference {
                attitude: reference.attitude,
                rate: reference.attitude_rate,
                accel: feedforward.attitude_accel,
            };
            let torque = inner(&angle_ref, states)?;
            Ok(StepOutput { input: ControlInput::new(feedforward.thrust, torque), angle_ref })
        }
        StrategyKind::FlatPosition | StrategyKind::Combined => {
            let target = FlatStateRef { acceleration: feedforward.acceleration, ..*reference };
            let cmd = attitude_control(
                &measured.position,
                &measured.velocity,
                &target,
                feedforward.yaw_param,
                &mut states.attitude,
                &gains.attitude,
                p.mass,
                gravity,
                dt,
            )?;
            let angle_ref = states.reference_rates.update(cmd.attitude);
            let torque = if kind == StrategyKind::Combined {
                inner(&angle_ref, states)?
            } else {
                let (m, v) = euler_dynamics_terms(p, &angle_ref.attitude, &angle_ref.rate)?;
                m * angle_ref.accel + v
            };
            Ok(StepOutput { input: ControlInput::new(cmd.thrust, torque), angle_ref })
        }
    }
}
