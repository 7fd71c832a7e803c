//! Flatness maps from `z = (x, y, z, tan(psi/2))` and its derivatives to the
//! full state and input references.
//!
//! With `a = (z1'', z2'', z3'' + g)` the thrust axis satisfies
//! `T/m * R e3 = a`, which gives roll, pitch and thrust in closed form. Yaw
//! enters only through `sin(psi) = 2 z4 / (1 + z4²)` and
//! `cos(psi) = (1 - z4²) / (1 + z4²)`, so no trigonometric call is needed on
//! the flat side. Angle rates and accelerations are obtained by the chain rule
//! through the intermediate numerators and norms, and the torques by the
//! rotational Newton–Euler equation written in Euler coordinates.

use nalgebra::{Vector3, Vector4};
use thiserror::Error;

use crate::rigid_body::{euler_dynamics_terms, BodyParams, DynamicsError, Euler};

/// Arcsin arguments further than this outside `[-1, 1]` are reported.
const CLAMP_WARN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum FlatError {
    #[error("degenerate acceleration at t = {t}: z'' + g = {vertical} must be positive")]
    DegenerateAcceleration { t: f64, vertical: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Flat output and its time derivatives through order 4 at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatSample {
    pub t: f64,
    /// `derivs[r]` is `z^(r)`.
    pub derivs: [Vector4<f64>; 5],
}

impl FlatSample {
    /// Hover at `position` with constant yaw parameter `z4`.
    pub fn hover(t: f64, position: Vector3<f64>, z4: f64) -> Self {
        let mut derivs = [Vector4::zeros(); 5];
        derivs[0] = Vector4::new(position[0], position[1], position[2], z4);
        Self { t, derivs }
    }

    pub fn position(&self, r: usize) -> Vector3<f64> {
        self.derivs[r].xyz()
    }

    pub fn yaw_param(&self, r: usize) -> f64 {
        self.derivs[r][3]
    }

    /// `(k1, k2, k3) = (z1'', z2'', z3'' + g)`.
    pub fn thrust_axis(&self, gravity: f64) -> Vector3<f64> {
        self.position(2) + Vector3::new(0.0, 0.0, gravity)
    }

    pub fn check(&self, gravity: f64) -> Result<(), FlatError> {
        let vertical = self.derivs[2][2] + gravity;
        if vertical > 0.0 {
            Ok(())
        } else {
            Err(FlatError::DegenerateAcceleration { t: self.t, vertical })
        }
    }
}

/// Reference state and inputs reconstructed from a flat sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatStateRef {
    pub t: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub attitude: Euler,
    pub attitude_rate: Euler,
    pub attitude_accel: Euler,
    /// Yaw parameter `z4` the attitude was computed from.
    pub yaw_param: f64,
    pub thrust: f64,
    pub torque: Vector3<f64>,
}

fn yaw_trig(z4: f64) -> (f64, f64) {
    let den = 1.0 + z4 * z4;
    (2.0 * z4 / den, (1.0 - z4 * z4) / den)
}

fn clamped_asin_arg(u: f64) -> f64 {
    if u.abs() > 1.0 + CLAMP_WARN {
        log::warn!("roll arcsin argument {u} clamped to [-1, 1]");
    }
    u.clamp(-1.0, 1.0)
}

/// Roll and pitch for thrust axis `a` (must have `a.z > 0`) and yaw
/// parameter `z4`; yaw is `2 atan(z4)`.
pub fn attitude_from_thrust_axis(a: &Vector3<f64>, z4: f64) -> Euler {
    let (sp, cp) = yaw_trig(z4);
    let roll = clamped_asin_arg((sp * a[0] - cp * a[1]) / a.norm()).asin();
    let pitch = ((cp * a[0] + sp * a[1]) / a[2]).atan();
    Vector3::new(roll, pitch, 2.0 * z4.atan())
}

/// Roll, pitch, yaw of a flat sample.
pub fn flat_angles(s: &FlatSample, gravity: f64) -> Result<Euler, FlatError> {
    s.check(gravity)?;
    Ok(attitude_from_thrust_axis(&s.thrust_axis(gravity), s.yaw_param(0)))
}

/// `T = m * |(z1'', z2'', z3'' + g)|`.
pub fn flat_thrust(s: &FlatSample, mass: f64, gravity: f64) -> f64 {
    mass * s.thrust_axis(gravity).norm()
}

/// First and second time derivatives of the flat angles.
pub fn flat_angle_derivatives(s: &FlatSample, gravity: f64) -> Result<(Euler, Euler), FlatError> {
    s.check(gravity)?;
    let a = s.thrust_axis(gravity);
    let da = s.position(3);
    let dda = s.position(4);
    let (z4, dz4, ddz4) = (s.yaw_param(0), s.yaw_param(1), s.yaw_param(2));

    let q = 1.0 + z4 * z4;
    let (sp, cp) = yaw_trig(z4);
    let dpsi = 2.0 * dz4 / q;
    let ddpsi = 2.0 * ddz4 / q - 4.0 * z4 * dz4 * dz4 / (q * q);

    // Yaw-rotated horizontal components: p drives roll, v drives pitch.
    let p = sp * a[0] - cp * a[1];
    let v = cp * a[0] + sp * a[1];
    let p_rot = sp * da[0] - cp * da[1];
    let v_rot = cp * da[0] + sp * da[1];
    let dp = dpsi * v + p_rot;
    let dv = -dpsi * p + v_rot;
    let ddp = ddpsi * v + dpsi * dv + dpsi * v_rot + sp * dda[0] - cp * dda[1];
    let ddv = -ddpsi * p - dpsi * dp - dpsi * p_rot + cp * dda[0] + sp * dda[1];

    let n = a.norm();
    let dn = a.dot(&da) / n;
    let ddn = (da.norm_squared() + a.dot(&dda)) / n - a.dot(&da).powi(2) / (n * n * n);

    // roll = asin(u), u = p / n
    let u = clamped_asin_arg(p / n);
    let du = (dp * n - p * dn) / (n * n);
    let ddu = ddp / n - 2.0 * dp * dn / (n * n) - p * ddn / (n * n) + 2.0 * p * dn * dn / (n * n * n);
    let c2 = 1.0 - u * u;
    let c = c2.sqrt();
    let droll = du / c;
    let ddroll = ddu / c + u * du * du / (c2 * c);

    // pitch = atan(w), w = v / k3
    let (k3, dk3, ddk3) = (a[2], da[2], dda[2]);
    let w = v / k3;
    let dw = (dv * k3 - v * dk3) / (k3 * k3);
    let ddw = ddv / k3 - 2.0 * dv * dk3 / (k3 * k3) - v * ddk3 / (k3 * k3) + 2.0 * v * dk3 * dk3 / (k3 * k3 * k3);
    let s2 = 1.0 + w * w;
    let dpitch = dw / s2;
    let ddpitch = ddw / s2 - 2.0 * w * dw * dw / (s2 * s2);

    Ok((Vector3::new(droll, dpitch, dpsi), Vector3::new(ddroll, ddpitch, ddpsi)))
}

/// Reference torques `I (W eta'' + W' eta') + (W eta') × (I W eta')`.
pub fn flat_torques(s: &FlatSample, p: &BodyParams, gravity: f64) -> Result<Vector3<f64>, FlatError> {
    let eta = flat_angles(s, gravity)?;
    let (rate, accel) = flat_angle_derivatives(s, gravity)?;
    let (m, v) = euler_dynamics_terms(p, &eta, &rate)?;
    Ok(m * accel + v)
}

/// Complete reference: position, attitude, their derivatives, thrust and
/// torques.
pub fn full_flat_map(s: &FlatSample, p: &BodyParams, gravity: f64) -> Result<FlatStateRef, FlatError> {
    let attitude = flat_angles(s, gravity)?;
    let (attitude_rate, attitude_accel) = flat_angle_derivatives(s, gravity)?;
    let (m, v) = euler_dynamics_terms(p, &attitude, &attitude_rate)?;
    Ok(FlatStateRef {
        t: s.t,
        position: s.position(0),
        velocity: s.position(1),
        acceleration: s.position(2),
        attitude,
        attitude_rate,
        attitude_accel,
        yaw_param: s.yaw_param(0),
        thrust: flat_thrust(s, p.mass, gravity),
        torque: m * attitude_accel + v,
    })
}

/// Residuals of the two implicit relations tying roll and pitch to the
/// translational acceleration and yaw. Both vanish on consistent states.
pub fn implicit_residuals(accel: &Vector3<f64>, eta: &Euler, gravity: f64) -> (f64, f64) {
    let (sf, _) = eta[0].sin_cos();
    let (sp, cp) = eta[2].sin_cos();
    let (x, y, z) = (accel[0], accel[1], accel[2] + gravity);
    let r1 = sf * (x * x + y * y + z * z).sqrt() - sp * x + cp * y;
    let r2 = eta[1].tan() * z - cp * x - sp * y;
    (r1, r2)
}
