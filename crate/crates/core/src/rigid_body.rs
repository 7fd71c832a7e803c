//! Nonlinear 6-DOF quadcopter model.
//!
//! Attitude is parametrized by roll-pitch-yaw angles `(phi, theta, psi)` with
//! the rotation `R = Rz(psi) Ry(theta) Rx(phi)` mapping body vectors to the
//! inertial (East-North-Up) frame. Body rates are the gyroscope-frame angular
//! velocity, related to Euler rates through `omega_B = W(eta) * eta_dot`.

use std::ops::{Add, Mul};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `|cos(theta)|` at or below this value is treated as gimbal lock.
pub const GIMBAL_TOLERANCE: f64 = 1e-6;

/// Roll, pitch, yaw in radians.
pub type Euler = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DynamicsError {
    #[error("gimbal lock: |cos(theta)| = {cos_theta:.3e} is at or below {GIMBAL_TOLERANCE:e}")]
    GimbalLock { cos_theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum MixError {
    #[error("rotor {rotor} would need a negative squared speed ({square:.6e} rad^2/s^2)")]
    InfeasibleThrust { rotor: usize, square: f64 },
    #[error("rotor {rotor} would need {speed:.3} rad/s, above the {limit:.3} rad/s limit")]
    Saturated { rotor: usize, speed: f64, limit: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parameter `{name}` = {value} is out of range ({expected})")]
pub struct ParamError {
    pub name: &'static str,
    pub value: f64,
    pub expected: &'static str,
}

fn require(name: &'static str, value: f64, ok: bool, expected: &'static str) -> Result<(), ParamError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(ParamError { name, value, expected })
    }
}

/// Airframe and rotor constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyParams {
    /// kg
    pub mass: f64,
    /// Center-to-rotor distance, m.
    pub arm_length: f64,
    /// Rotor thrust per squared speed, kg·m.
    pub thrust_coeff: f64,
    /// Rotor reaction torque per squared speed, kg·m².
    pub drag_torque_coeff: f64,
    /// Diagonal of the body inertia tensor, kg·m².
    pub inertia: [f64; 3],
    /// rad/s
    pub max_rotor_speed: f64,
    /// rad/s²
    pub max_rotor_accel: f64,
}

impl BodyParams {
    /// Crazyflie 2.0 constants used in the reference scenario.
    pub fn crazyflie() -> Self {
        Self {
            mass: 0.5,
            arm_length: 0.225,
            thrust_coeff: 2.98e-6,
            drag_torque_coeff: 1.14e-7,
            inertia: [4.856e-3, 4.856e-3, 8.801e-3],
            max_rotor_speed: rpm_to_rad_per_sec(58_800.0),
            max_rotor_accel: 1000.0,
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        const POS: &str = "> 0";
        require("mass", self.mass, self.mass > 0.0, POS)?;
        require("arm_length", self.arm_length, self.arm_length > 0.0, POS)?;
        require("thrust_coeff", self.thrust_coeff, self.thrust_coeff > 0.0, POS)?;
        require("drag_torque_coeff", self.drag_torque_coeff, self.drag_torque_coeff > 0.0, POS)?;
        for (name, v) in ["inertia[0]", "inertia[1]", "inertia[2]"].into_iter().zip(self.inertia) {
            require(name, v, v > 0.0, POS)?;
        }
        require("max_rotor_speed", self.max_rotor_speed, self.max_rotor_speed > 0.0, POS)?;
        require("max_rotor_accel", self.max_rotor_accel, self.max_rotor_accel > 0.0, POS)?;
        Ok(())
    }

    pub fn inertia_vec(&self) -> Vector3<f64> {
        Vector3::from(self.inertia)
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia_vec())
    }
}

pub fn rpm_to_rad_per_sec(rpm: f64) -> f64 {
    rpm * std::f64::consts::TAU / 60.0
}

/// Gravity and aerodynamic drag constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    /// m/s²
    pub gravity: f64,
    /// kg/m³
    pub air_density: f64,
    pub drag_coeff: f64,
    /// Body-frame projected areas onto the YZ, XZ and XY planes, m².
    pub areas: [f64; 3],
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            air_density: 1.225,
            drag_coeff: 1.0,
            areas: [1e-3; 3],
        }
    }
}

impl EnvParams {
    /// Same gravity, drag switched off.
    pub fn without_drag(&self) -> Self {
        Self {
            drag_coeff: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        require("gravity", self.gravity, self.gravity > 0.0, "> 0")?;
        require("air_density", self.air_density, self.air_density >= 0.0, ">= 0")?;
        require("drag_coeff", self.drag_coeff, self.drag_coeff >= 0.0, ">= 0")?;
        for (name, v) in ["areas[0]", "areas[1]", "areas[2]"].into_iter().zip(self.areas) {
            require(name, v, v >= 0.0, ">= 0")?;
        }
        Ok(())
    }
}

/// Full vehicle state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidState {
    /// Inertial position, m.
    pub position: Vector3<f64>,
    /// Inertial velocity, m/s.
    pub velocity: Vector3<f64>,
    /// Roll, pitch, yaw, rad.
    pub attitude: Euler,
    /// Body-frame angular velocity, rad/s.
    pub body_rates: Vector3<f64>,
}

impl RigidState {
    /// Level hover at rest.
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self {
            position,
            ..Default::default()
        }
    }

    pub fn euler_rates(&self) -> Result<Euler, DynamicsError> {
        let (_, w_inv) = body_rate_map(&self.attitude)?;
        Ok(w_inv * self.body_rates)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.velocity.iter()).chain(self.attitude.iter()).chain(self.body_rates.iter()).all(|v| v.is_finite())
    }

    fn advanced(&self, d: &StateDerivative, h: f64) -> Self {
        Self {
            position: self.position + d.velocity * h,
            velocity: self.velocity + d.acceleration * h,
            attitude: self.attitude + d.euler_rates * h,
            body_rates: self.body_rates + d.angular_acceleration * h,
        }
    }
}

/// Time derivative of a [`RigidState`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub euler_rates: Euler,
    /// Body-frame angular acceleration.
    pub angular_acceleration: Vector3<f64>,
}

impl Add for StateDerivative {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            velocity: self.velocity + o.velocity,
            acceleration: self.acceleration + o.acceleration,
            euler_rates: self.euler_rates + o.euler_rates,
            angular_acceleration: self.angular_acceleration + o.angular_acceleration,
        }
    }
}

impl Mul<f64> for StateDerivative {
    type Output = Self;

    fn mul(self, k: f64) -> Self {
        Self {
            velocity: self.velocity * k,
            acceleration: self.acceleration * k,
            euler_rates: self.euler_rates * k,
            angular_acceleration: self.angular_acceleration * k,
        }
    }
}

/// Total thrust along body z plus roll/pitch/yaw torques.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    /// N
    pub thrust: f64,
    /// N·m
    pub torque: Vector3<f64>,
}

impl ControlInput {
    pub fn new(thrust: f64, torque: Vector3<f64>) -> Self {
        Self { thrust, torque }
    }

    pub fn hover(p: &BodyParams, env: &EnvParams) -> Self {
        Self::new(p.mass * env.gravity, Vector3::zeros())
    }
}

/// Rotor angular speeds, rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RotorSpeeds(pub [f64; 4]);

impl RotorSpeeds {
    pub fn squares(&self) -> [f64; 4] {
        self.0.map(|w| w * w)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Square roots of `squares` clamped into `[0, max_speed^2]`; the flag is
    /// set when any entry had to be clamped.
    pub fn from_squares_clamped(squares: [f64; 4], max_speed: f64) -> (Self, bool) {
        let cap = max_speed * max_speed;
        let mut clamped = false;
        let speeds = squares.map(|s| {
            if s < 0.0 {
                clamped = true;
                0.0
            } else if s > cap {
                clamped = true;
                max_speed
            } else {
                s.sqrt()
            }
        });
        (Self(speeds), clamped)
    }

    /// Limits each rotor's change from `previous` to `max_step`. Returns the
    /// limited speeds and whether any rotor was limited.
    pub fn rate_limited(&self, previous: &RotorSpeeds, max_step: f64) -> (Self, bool) {
        let mut limited = false;
        let mut out = self.0;
        for (w, prev) in out.iter_mut().zip(previous.0) {
            let lo = prev - max_step;
            let hi = prev + max_step;
            if *w < lo {
                *w = lo;
                limited = true;
            } else if *w > hi {
                *w = hi;
                limited = true;
            }
        }
        (Self(out.map(|w| w.max(0.0))), limited)
    }
}

/// Inertial wind velocity, m/s.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindSample(pub Vector3<f64>);

impl WindSample {
    pub fn calm() -> Self {
        Self(Vector3::zeros())
    }
}

/// `R = Rz(psi) Ry(theta) Rx(phi)`, body to inertial.
pub fn rotation_matrix(eta: &Euler) -> Matrix3<f64> {
    let (sf, cf) = eta[0].sin_cos();
    let (st, ct) = eta[1].sin_cos();
    let (sp, cp) = eta[2].sin_cos();
    Matrix3::new(
        ct * cp,
        sf * st * cp - cf * sp,
        cf * st * cp + sf * sp,
        ct * sp,
        sf * st * sp + cf * cp,
        cf * st * sp - sf * cp,
        -st,
        sf * ct,
        cf * ct,
    )
}

fn check_gimbal(cos_theta: f64) -> Result<(), DynamicsError> {
    if cos_theta.abs() <= GIMBAL_TOLERANCE {
        Err(DynamicsError::GimbalLock { cos_theta })
    } else {
        Ok(())
    }
}

/// Euler-rate to body-rate map `W` and its inverse.
pub fn body_rate_map(eta: &Euler) -> Result<(Matrix3<f64>, Matrix3<f64>), DynamicsError> {
    let (sf, cf) = eta[0].sin_cos();
    let (st, ct) = eta[1].sin_cos();
    check_gimbal(ct)?;
    let w = Matrix3::new(1.0, 0.0, -st, 0.0, cf, sf * ct, 0.0, -sf, cf * ct);
    let tt = st / ct;
    let w_inv = Matrix3::new(1.0, sf * tt, cf * tt, 0.0, cf, -sf, 0.0, sf / ct, cf / ct);
    Ok((w, w_inv))
}

/// Time derivative of `W` along `eta_dot`.
pub fn body_rate_map_derivative(eta: &Euler, eta_dot: &Euler) -> Matrix3<f64> {
    let (sf, cf) = eta[0].sin_cos();
    let (st, ct) = eta[1].sin_cos();
    let (df, dt) = (eta_dot[0], eta_dot[1]);
    Matrix3::new(
        0.0,
        0.0,
        -ct * dt,
        0.0,
        -sf * df,
        cf * ct * df - sf * st * dt,
        0.0,
        -cf * df,
        -sf * ct * df - cf * st * dt,
    )
}

/// Rotational dynamics in Euler coordinates, `M(eta) eta'' + V(eta, eta') = tau`,
/// with `M = I W` and `V = I W' eta' + (W eta') × (I W eta')`.
pub fn euler_dynamics_terms(
    p: &BodyParams,
    eta: &Euler,
    eta_dot: &Euler,
) -> Result<(Matrix3<f64>, Vector3<f64>), DynamicsError> {
    let (w, _) = body_rate_map(eta)?;
    let w_dot = body_rate_map_derivative(eta, eta_dot);
    let inertia = p.inertia_matrix();
    let rates = w * eta_dot;
    let bias = inertia * (w_dot * eta_dot) + rates.cross(&(inertia * rates));
    Ok((inertia * w, bias))
}

/// Thrust and torques produced by the four rotors.
pub fn rotor_forces(speeds: &RotorSpeeds, p: &BodyParams) -> ControlInput {
    let [s1, s2, s3, s4] = speeds.squares();
    let lk = p.arm_length * p.thrust_coeff;
    ControlInput {
        thrust: p.thrust_coeff * (s1 + s2 + s3 + s4),
        torque: Vector3::new(lk * (s4 - s2), lk * (s3 - s1), p.drag_torque_coeff * (-s1 + s2 - s3 + s4)),
    }
}

/// Linear map from squared rotor speeds to `(T, tau_phi, tau_theta, tau_psi)`.
pub fn mixer_matrix(p: &BodyParams) -> Matrix4<f64> {
    let k = p.thrust_coeff;
    let lk = p.arm_length * k;
    let b = p.drag_torque_coeff;
    Matrix4::new(k, k, k, k, 0.0, -lk, 0.0, lk, -lk, 0.0, lk, 0.0, -b, b, -b, b)
}

/// Squared rotor speeds realizing `u` (closed-form inverse of the mixer).
/// Entries may be negative when `u` is not achievable.
pub fn rotor_squares(u: &ControlInput, p: &BodyParams) -> [f64; 4] {
    let a = u.thrust / p.thrust_coeff;
    let roll = u.torque[0] / (p.arm_length * p.thrust_coeff);
    let pitch = u.torque[1] / (p.arm_length * p.thrust_coeff);
    let yaw = u.torque[2] / p.drag_torque_coeff;
    let odd = 0.5 * (a - yaw); // rotors 1 and 3
    let even = 0.5 * (a + yaw); // rotors 2 and 4
    [
        0.5 * (odd - pitch),
        0.5 * (even - roll),
        0.5 * (odd + pitch),
        0.5 * (even + roll),
    ]
}

/// Rotor speeds realizing `u` exactly, or the reason they do not exist.
pub fn rotor_mix(u: &ControlInput, p: &BodyParams) -> Result<RotorSpeeds, MixError> {
    let squares = rotor_squares(u, p);
    let mut speeds = [0.0; 4];
    for (i, (&s, w)) in squares.iter().zip(speeds.iter_mut()).enumerate() {
        if s < 0.0 {
            return Err(MixError::InfeasibleThrust { rotor: i + 1, square: s });
        }
        *w = s.sqrt();
        if *w > p.max_rotor_speed {
            return Err(MixError::Saturated { rotor: i + 1, speed: *w, limit: p.max_rotor_speed });
        }
    }
    Ok(RotorSpeeds(speeds))
}

/// Aerodynamic drag from the wind-relative velocity `V_r = w - v`.
///
/// The projected area weights each body-axis area by `|axis · V_r| / |V_r|`;
/// zero relative velocity yields exactly zero force.
pub fn drag_force(state: &RigidState, wind: &WindSample, env: &EnvParams) -> Vector3<f64> {
    let rel = wind.0 - state.velocity;
    let speed = rel.norm();
    if speed == 0.0 {
        return Vector3::zeros();
    }
    let r = rotation_matrix(&state.attitude);
    let area: f64 = (0..3).map(|j| env.areas[j] * r.column(j).dot(&rel).abs() / speed).sum();
    rel * (0.5 * env.drag_coeff * env.air_density * speed * area)
}

/// Right-hand side of the translational and rotational equations of motion.
pub fn state_derivative(
    state: &RigidState,
    u: &ControlInput,
    wind: &WindSample,
    p: &BodyParams,
    env: &EnvParams,
) -> Result<StateDerivative, DynamicsError> {
    let (_, w_inv) = body_rate_map(&state.attitude)?;
    let r = rotation_matrix(&state.attitude);
    let thrust_dir = r.column(2).into_owned();
    let acceleration = Vector3::new(0.0, 0.0, -env.gravity)
        + thrust_dir * (u.thrust / p.mass)
        + drag_force(state, wind, env) / p.mass;

    let inertia = p.inertia_vec();
    let w = state.body_rates;
    let gyro = w.cross(&inertia.component_mul(&w));
    let angular_acceleration = (u.torque - gyro).component_div(&inertia);

    Ok(StateDerivative {
        velocity: state.velocity,
        acceleration,
        euler_rates: w_inv * w,
        angular_acceleration,
    })
}

/// One classical RK4 step with constant input and wind.
pub fn integrate_step(
    state: &RigidState,
    u: &ControlInput,
    wind: &WindSample,
    p: &BodyParams,
    env: &EnvParams,
    dt: f64,
) -> Result<RigidState, DynamicsError> {
    integrate_step_with(state, 0.0, dt, p, env, |_| (*u, *wind))
}

/// One classical RK4 step from time `t` where input and wind are re-evaluated
/// at every stage time.
pub fn integrate_step_with<F>(
    state: &RigidState,
    t: f64,
    dt: f64,
    p: &BodyParams,
    env: &EnvParams,
    inputs: F,
) -> Result<RigidState, DynamicsError>
where
    F: Fn(f64) -> (ControlInput, WindSample),
{
    debug_assert!(dt > 0.0);
    let f = |s: &RigidState, time: f64| {
        let (u, w) = inputs(time);
        state_derivative(s, &u, &w, p, env)
    };
    let half = 0.5 * dt;
    let k1 = f(state, t)?;
    let k2 = f(&state.advanced(&k1, half), t + half)?;
    let k3 = f(&state.advanced(&k2, half), t + half)?;
    let k4 = f(&state.advanced(&k3, dt), t + dt)?;
    let slope = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (1.0 / 6.0);
    Ok(state.advanced(&slope, dt))
}

/// `(T, tau)` packed as a 4-vector, in mixer-matrix row order.
pub fn input_vector(u: &ControlInput) -> Vector4<f64> {
    Vector4::new(u.thrust, u.torque[0], u.torque[1], u.torque[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{rngs::StdRng, Rng, SeedableRng};
    use std::f64::consts::FRAC_PI_2;

    fn random_euler(rng: &mut StdRng, pitch_bound: f64) -> Euler {
        Vector3::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-pitch_bound..pitch_bound),
            rng.gen_range(-3.0..3.0),
        )
    }

    #[test]
    fn rotation_identity_and_yaw_quarter_turn() {
        assert_eq!(rotation_matrix(&Euler::zeros()), Matrix3::identity());
        let r = rotation_matrix(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expected).abs().max() < 1e-15);
    }

    #[test]
    fn rotation_matches_elementary_product() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let eta = random_euler(&mut rng, 1.5);
            let rx = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), eta[0]);
            let ry = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), eta[1]);
            let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), eta[2]);
            let product = (rz * ry * rx).into_inner();
            assert!((rotation_matrix(&eta) - product).abs().max() < 1e-14);
        }
    }

    #[test]
    fn rotation_orthonormal() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..1000 {
            let r = rotation_matrix(&random_euler(&mut rng, 3.0));
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn body_rate_map_inverse_and_gimbal_lock() {
        let (w, w_inv) = body_rate_map(&Euler::zeros()).unwrap();
        assert_eq!(w, Matrix3::identity());
        assert_eq!(w_inv, Matrix3::identity());
        assert!(matches!(
            body_rate_map(&Vector3::new(0.1, FRAC_PI_2, 0.0)),
            Err(DynamicsError::GimbalLock { .. })
        ));

        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..1000 {
            let eta = random_euler(&mut rng, 1.0);
            let (w, w_inv) = body_rate_map(&eta).unwrap();
            // independent inverse via nalgebra's general 3x3 inversion
            let generic = w.try_inverse().unwrap();
            assert!((w * w_inv - Matrix3::identity()).abs().max() < 1e-12);
            assert!((w_inv - generic).abs().max() < 1e-12);
        }
    }

    #[test]
    fn body_rate_map_derivative_matches_finite_difference() {
        let mut rng = StdRng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..100 {
            let eta = random_euler(&mut rng, 1.0);
            let rate = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (wp, _) = body_rate_map(&(eta + rate * h)).unwrap();
            let (wm, _) = body_rate_map(&(eta - rate * h)).unwrap();
            let fd = (wp - wm) / (2.0 * h);
            assert!((fd - body_rate_map_derivative(&eta, &rate)).abs().max() < 1e-8);
        }
    }

    #[test]
    fn rotor_forces_symmetric_and_zero() {
        let p = BodyParams::crazyflie();
        let u = rotor_forces(&RotorSpeeds([500.0; 4]), &p);
        assert_eq!(u.torque, Vector3::zeros());
        assert_relative_eq!(u.thrust, 4.0 * p.thrust_coeff * 500.0 * 500.0, max_relative = 1e-15);
        let z = rotor_forces(&RotorSpeeds::default(), &p);
        assert_eq!(z, ControlInput::default());
    }

    #[test]
    fn hover_rotor_speed() {
        let p = BodyParams::crazyflie();
        let env = EnvParams::default();
        // K_T * 4 w^2 = m g
        let expected = (p.mass * env.gravity / (4.0 * p.thrust_coeff)).sqrt();
        assert!((expected - 641.5).abs() < 0.1);
        let speeds = rotor_mix(&ControlInput::hover(&p, &env), &p).unwrap();
        for w in speeds.0 {
            assert_relative_eq!(w, expected, max_relative = 1e-12);
        }
        assert!(speeds.max() * 60.0 / std::f64::consts::TAU < 58_800.0);
        let u = rotor_forces(&RotorSpeeds([641.5; 4]), &p);
        assert!((u.thrust - 4.905).abs() < 1e-3);
        assert_eq!(rotor_mix(&ControlInput::default(), &p).unwrap(), RotorSpeeds([0.0; 4]));
    }

    #[test]
    fn rotor_mix_inverts_mixer_matrix() {
        let p = BodyParams::crazyflie();
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..500 {
            let squares = Vector4::from_fn(|_, _| rng.gen_range(1e4..1e6));
            let u_vec = mixer_matrix(&p) * squares;
            let u = ControlInput::new(u_vec[0], Vector3::new(u_vec[1], u_vec[2], u_vec[3]));
            let back = rotor_forces(&rotor_mix(&u, &p).unwrap(), &p);
            assert_relative_eq!(back.thrust, u.thrust, max_relative = 1e-9);
            for i in 0..3 {
                assert!((back.torque[i] - u.torque[i]).abs() <= 1e-9 * u.torque[i].abs().max(1e-12));
            }
            let solved = mixer_matrix(&p).lu().solve(&u_vec).unwrap();
            let closed = rotor_squares(&u, &p);
            for i in 0..4 {
                assert_relative_eq!(closed[i], solved[i], max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn rotor_mix_errors() {
        let p = BodyParams::crazyflie();
        let neg = ControlInput::new(0.1, Vector3::new(0.5, 0.0, 0.0));
        assert!(matches!(rotor_mix(&neg, &p), Err(MixError::InfeasibleThrust { rotor: 2, .. })));
        let big = ControlInput::new(1000.0, Vector3::zeros());
        assert!(matches!(rotor_mix(&big, &p), Err(MixError::Saturated { .. })));
    }

    #[test]
    fn clamping_and_rate_limit() {
        let (s, clamped) = RotorSpeeds::from_squares_clamped([-1.0, 4.0, 100.0, 9.0], 5.0);
        assert!(clamped);
        assert_eq!(s.0, [0.0, 2.0, 5.0, 3.0]);
        let (l, limited) = RotorSpeeds([10.0, 0.0, 5.0, 7.0]).rate_limited(&RotorSpeeds([5.0; 4]), 2.0);
        assert!(limited);
        assert_eq!(l.0, [7.0, 3.0, 5.0, 7.0]);
    }

    fn drag_oracle(state: &RigidState, wind: &WindSample, env: &EnvParams) -> Vector3<f64> {
        let vr = wind.0 - state.velocity;
        let n = (vr[0] * vr[0] + vr[1] * vr[1] + vr[2] * vr[2]).sqrt();
        if n == 0.0 {
            return Vector3::zeros();
        }
        let r = rotation_matrix(&state.attitude);
        let mut a = 0.0;
        for j in 0..3 {
            let mut dot = 0.0;
            for i in 0..3 {
                dot += r[(i, j)] * vr[i];
            }
            a += env.areas[j] * (dot / n).abs();
        }
        Vector3::new(vr[0], vr[1], vr[2]) * (0.5 * env.drag_coeff * env.air_density * n * a)
    }

    #[test]
    fn drag_cases() {
        let env = EnvParams { areas: [0.01, 0.02, 0.03], ..Default::default() };
        let s = RigidState { velocity: Vector3::new(1.0, 2.0, 3.0), ..Default::default() };
        assert_eq!(drag_force(&s, &WindSample(s.velocity), &env), Vector3::zeros());

        let level = RigidState::default();
        let f = drag_force(&level, &WindSample(Vector3::new(3.0, 0.0, 0.0)), &env);
        assert_relative_eq!(f[0], 0.5 * env.drag_coeff * env.air_density * 9.0 * 0.01, max_relative = 1e-14);
        assert_eq!((f[1], f[2]), (0.0, 0.0));

        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..500 {
            let state = RigidState {
                position: Vector3::zeros(),
                velocity: Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0)),
                attitude: random_euler(&mut rng, 1.2),
                body_rates: Vector3::zeros(),
            };
            let wind = WindSample(Vector3::from_fn(|_, _| rng.gen_range(-8.0..8.0)));
            let f = drag_force(&state, &wind, &env);
            assert!((f - drag_oracle(&state, &wind, &env)).abs().max() < 1e-12);
            // odd in the relative velocity
            let still = WindSample::calm();
            let mirrored = RigidState { velocity: -state.velocity, ..state };
            assert_eq!(drag_force(&mirrored, &still, &env), -drag_force(&state, &still, &env));
        }
    }

    #[test]
    fn hover_and_free_fall_derivatives() {
        let p = BodyParams::crazyflie();
        let env = EnvParams::default();
        let s = RigidState::at_rest(Vector3::new(0.0, 0.0, 5.0));
        let d = state_derivative(&s, &ControlInput::hover(&p, &env), &WindSample::calm(), &p, &env).unwrap();
        assert_eq!(d, StateDerivative::default());
        let d = state_derivative(&s, &ControlInput::default(), &WindSample::calm(), &p, &env).unwrap();
        assert_eq!(d.acceleration, Vector3::new(0.0, 0.0, -env.gravity));
    }

    #[test]
    fn gyroscopic_term_matches_cross_product() {
        let p = BodyParams::crazyflie();
        let env = EnvParams::default();
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..200 {
            let w = Vector3::from_fn(|_, _| rng.gen_range(-10.0..10.0));
            let s = RigidState { body_rates: w, ..Default::default() };
            let d = state_derivative(&s, &ControlInput::default(), &WindSample::calm(), &p, &env).unwrap();
            let iw = p.inertia_matrix() * w;
            let gyro = Vector3::new(w[1] * iw[2] - w[2] * iw[1], w[2] * iw[0] - w[0] * iw[2], w[0] * iw[1] - w[1] * iw[0]);
            let expected = -(p.inertia_matrix().try_inverse().unwrap() * gyro);
            assert!((d.angular_acceleration - expected).abs().max() < 1e-12);
        }
    }

    #[test]
    fn hover_is_a_fixed_point() {
        let p = BodyParams::crazyflie();
        let env = EnvParams::default().without_drag();
        let s0 = RigidState::at_rest(Vector3::new(1.0, -2.0, 5.0));
        let mut s = s0;
        for _ in 0..1000 {
            s = integrate_step(&s, &ControlInput::hover(&p, &env), &WindSample::calm(), &p, &env, 1e-3).unwrap();
        }
        assert!((s.position - s0.position).abs().max() < 1e-12);
        assert!(s.velocity.abs().max() < 1e-12);
    }

    #[test]
    fn free_fall_matches_ballistics_and_conserves_energy() {
        let p = BodyParams::crazyflie();
        let env = EnvParams::default().without_drag();
        let mut s = RigidState::at_rest(Vector3::new(0.0, 0.0, 10.0));
        s.velocity = Vector3::new(1.0, 0.5, 2.0);
        let energy = |s: &RigidState| 0.5 * s.velocity.norm_squared() + env.gravity * s.position[2];
        let e0 = energy(&s);
        for _ in 0..100 {
            s = integrate_step(&s, &ControlInput::default(), &WindSample::calm(), &p, &env, 0.01).unwrap();
        }
        let z = 10.0 + 2.0 - 0.5 * env.gravity;
        assert!((s.position[2] - z).abs() < 1e-6);
        assert!((energy(&s) - e0).abs() < 1e-9);
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let p = BodyParams::crazyflie();
        let env = EnvParams::default().without_drag();
        let mut start = RigidState::at_rest(Vector3::new(0.0, 0.0, 5.0));
        start.attitude = Vector3::new(0.2, -0.1, 0.3);
        start.body_rates = Vector3::new(1.0, -0.5, 2.0);
        let u = ControlInput::new(5.5, Vector3::new(1e-3, -2e-3, 5e-4));
        let run = |dt: f64| {
            let mut s = start;
            let n = (1.0 / dt).round() as usize;
            for _ in 0..n {
                s = integrate_step(&s, &u, &WindSample::calm(), &p, &env, dt).unwrap();
            }
            s
        };
        let (a, b, c) = (run(0.02), run(0.01), run(0.005));
        let e1 = (a.position - b.position).norm() + (a.attitude - b.attitude).norm();
        let e2 = (b.position - c.position).norm() + (b.attitude - c.attitude).norm();
        let ratio = e1 / e2;
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn param_validation() {
        assert!(BodyParams::crazyflie().validate().is_ok());
        let bad = BodyParams { mass: 0.0, ..BodyParams::crazyflie() };
        assert_eq!(bad.validate().unwrap_err().name, "mass");
        let env = EnvParams { air_density: -1.0, ..Default::default() };
        assert_eq!(env.validate().unwrap_err().name, "air_density");
    }
}
