#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use rand::{rngs::StdRng, Rng};

use quadflat::flat_map::FlatSample;
use quadflat::rigid_body::rotation_matrix;
use quadflat::spline::{flat_sample_at, yaw_profile, BSplineCurve, KnotVector, YawProfile};

pub const G: f64 = 9.81;

/// Random order-6 clamped curve wandering around (0, 0, 5) plus a random
/// rest-to-rest yaw sweep. Curves whose thrust axis would tilt beyond about
/// 60 degrees or point less than half-g upward are redrawn.
pub fn random_trajectory(rng: &mut StdRng) -> (BSplineCurve, YawProfile) {
    loop {
        let (curve, yaw) = draw_trajectory(rng);
        let (t0, tn) = curve.domain();
        let feasible = (0..=400).all(|k| {
            let a = curve.eval(t0 + (tn - t0) * (k as f64 / 400.0), 2).unwrap() + Vector3::new(0.0, 0.0, G);
            a[2] > 0.5 * G && a.xy().norm() < 1.7 * a[2]
        });
        if feasible {
            return (curve, yaw);
        }
    }
}

fn draw_trajectory(rng: &mut StdRng) -> (BSplineCurve, YawProfile) {
    let n_ctrl = rng.gen_range(8..=12);
    let tn = rng.gen_range(5.0..12.0);
    let kv = KnotVector::clamped_uniform(0.0, tn, n_ctrl, 6).unwrap();
    let mut p = Vector3::new(0.0, 0.0, 5.0);
    let points = (0..n_ctrl)
        .map(|_| {
            p += Vector3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.4..0.4));
            p
        })
        .collect();
    let yaw = yaw_profile(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0, tn);
    (BSplineCurve::new(kv, points).unwrap(), yaw)
}

pub fn sample(curve: &BSplineCurve, yaw: &YawProfile, t: f64) -> FlatSample {
    flat_sample_at(curve, yaw, t).unwrap()
}

/// Random time whose finite-difference stencil of half-width `reach` stays
/// inside one knot span, where the curve is a polynomial.
pub fn smooth_time(rng: &mut StdRng, curve: &BSplineCurve, reach: f64) -> f64 {
    let (t0, tn) = curve.domain();
    loop {
        let t = rng.gen_range(t0..tn);
        if curve.knots().knots().iter().all(|k| (k - t).abs() > reach) {
            return t;
        }
    }
}

/// Five-point central first derivative.
pub fn d1<F: Fn(f64) -> Vector3<f64>>(f: F, t: f64, h: f64) -> Vector3<f64> {
    (f(t - 2.0 * h) - f(t - h) * 8.0 + f(t + h) * 8.0 - f(t + 2.0 * h)) / (12.0 * h)
}

/// Five-point central second derivative.
pub fn d2<F: Fn(f64) -> Vector3<f64>>(f: F, t: f64, h: f64) -> Vector3<f64> {
    (-f(t - 2.0 * h) + f(t - h) * 16.0 - f(t) * 30.0 + f(t + h) * 16.0 - f(t + 2.0 * h)) / (12.0 * h * h)
}

/// Body angular velocity from the rotation matrix alone: `[w]x = R^T R'`.
pub fn body_rate_from_rotation<F: Fn(f64) -> Vector3<f64>>(angles: &F, t: f64, h: f64) -> Vector3<f64> {
    let r = |s: f64| rotation_matrix(&angles(s));
    let dr: Matrix3<f64> = (r(t - 2.0 * h) - r(t - h) * 8.0 + r(t + h) * 8.0 - r(t + 2.0 * h)) / (12.0 * h);
    let skew = r(t).transpose() * dr;
    Vector3::new(skew[(2, 1)] - skew[(1, 2)], skew[(0, 2)] - skew[(2, 0)], skew[(1, 0)] - skew[(0, 1)]) * 0.5
}

/// `|a - b| <= rel * |b|` in the Euclidean norm.
pub fn close(a: &Vector3<f64>, b: &Vector3<f64>, rel: f64) -> bool {
    (a - b).norm() <= rel * b.norm()
}
