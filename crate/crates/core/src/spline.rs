//! Clamped B-splines for the position channels of the flat output, the
//! waypoint-constrained trajectory fit, and the polynomial yaw channel.
//!
//! Orders follow the Cox–de Boor convention: an order-`d` basis function is a
//! piecewise polynomial of degree `d - 1`, and order 1 is the span indicator.

use nalgebra::{DMatrix, Vector3, Vector4};
use thiserror::Error;

use crate::flat_map::FlatSample;

/// Highest derivative of the flat output the maps consume.
pub const MAX_FLAT_DERIVATIVE: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("knot vector is decreasing at index {index}")]
    UnsortedKnots { index: usize },
    #[error("basis index {index} out of range (valid 0..={max})")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("derivative order {deriv} requires spline order above {deriv} (got {order})")]
    OrderTooHigh { deriv: usize, order: usize },
    #[error("spline order {order} needs at least {order} control points and a non-empty knot vector")]
    TooFewControlPoints { order: usize },
    #[error("expected {expected} control points, got {got}")]
    ControlPointCount { expected: usize, got: usize },
    #[error("t = {t} is outside the domain [{lo}, {hi}]")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },
    #[error("waypoint times must be strictly increasing (violated at index {index})")]
    NonIncreasingTimes { index: usize },
    #[error("need at least two waypoints, got {got}")]
    TooFewWaypoints { got: usize },
    #[error("waypoints and times differ in length ({points} vs {times})")]
    WaypointLength { points: usize, times: usize },
    #[error("interpolation constraints have rank {rank}, need {required} (too few control points for the waypoint layout)")]
    InfeasibleConstraints { rank: usize, required: usize },
    #[error("KKT system is singular")]
    SingularKkt,
    #[error("invalid sampling step {dt}")]
    InvalidStep { dt: f64 },
}

/// Non-decreasing knot sequence together with the spline order it serves.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
    order: usize,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>, order: usize) -> Result<Self, SplineError> {
        if order == 0 || knots.len() <= order {
            return Err(SplineError::TooFewControlPoints { order });
        }
        if let Some(index) = knots.windows(2).position(|w| !(w[0] <= w[1])) {
            return Err(SplineError::UnsortedKnots { index: index + 1 });
        }
        Ok(Self { knots, order })
    }

    /// Clamped knots on `[t0, tn]`: `order` copies of each end and
    /// `n_ctrl - order` equally spaced interior knots.
    pub fn clamped_uniform(t0: f64, tn: f64, n_ctrl: usize, order: usize) -> Result<Self, SplineError> {
        if order == 0 || n_ctrl < order {
            return Err(SplineError::TooFewControlPoints { order });
        }
        let interior = n_ctrl - order;
        let spans = interior + 1;
        let mut knots = vec![t0; order];
        knots.extend((1..=interior).map(|j| t0 + (tn - t0) * j as f64 / spans as f64));
        knots.extend(std::iter::repeat_n(tn, order));
        Self::new(knots, order)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of order-`order` basis functions (`n + 1`).
    pub fn basis_count(&self) -> usize {
        self.knots.len() - self.order
    }

    /// Parameter domain `[tau_{d-1}, tau_{n+1}]`, which for clamped knots is
    /// `[t0, tN]`.
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.order - 1], self.knots[self.basis_count()])
    }

    /// Distinct consecutive knot pairs.
    pub fn spans(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.knots.windows(2).filter(|w| w[0] < w[1]).map(|w| (w[0], w[1]))
    }

    /// Order-1 indicators for all `m` spans at `t`. At the last knot the
    /// last non-empty span is used (left limit), so clamped curves reach
    /// their final control point.
    fn indicators(&self, t: f64) -> Vec<f64> {
        let m = self.knots.len() - 1;
        let mut out = vec![0.0; m];
        let last = self.knots[m];
        if t >= last {
            if t == last {
                if let Some(i) = (0..m).rev().find(|&i| self.knots[i] < self.knots[i + 1]) {
                    out[i] = 1.0;
                }
            }
            return out;
        }
        for (i, w) in self.knots.windows(2).enumerate() {
            if w[0] <= t && t < w[1] {
                out[i] = 1.0;
            }
        }
        out
    }

    /// Values of every order-`order` basis function at `t`, built bottom-up
    /// from the Cox–de Boor recursion with `0/0 := 0`.
    fn basis_table(&self, t: f64, order: usize) -> Vec<f64> {
        let tau = &self.knots;
        let mut level = self.indicators(t);
        for k in 2..=order {
            let next: Vec<f64> = (0..level.len() - 1)
                .map(|i| {
                    let left = ratio(t - tau[i], tau[i + k - 1] - tau[i]) * level[i];
                    let right = ratio(tau[i + k] - t, tau[i + k] - tau[i + 1]) * level[i + 1];
                    left + right
                })
                .collect();
            level = next;
        }
        level
    }

    /// `deriv`-th derivatives of every order-`order` basis function at `t`.
    pub fn basis_derivatives(&self, t: f64, order: usize, deriv: usize) -> Result<Vec<f64>, SplineError> {
        if deriv >= order {
            return Err(SplineError::OrderTooHigh { deriv, order });
        }
        if order == 0 || order >= self.knots.len() {
            return Err(SplineError::TooFewControlPoints { order });
        }
        let tau = &self.knots;
        let mut level = self.basis_table(t, order - deriv);
        for k in (order - deriv + 1)..=order {
            let scale = (k - 1) as f64;
            let next: Vec<f64> = (0..level.len() - 1)
                .map(|i| {
                    scale
                        * (ratio(level[i], tau[i + k - 1] - tau[i])
                            - ratio(level[i + 1], tau[i + k] - tau[i + 1]))
                })
                .collect();
            level = next;
        }
        Ok(level)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `B_{i,order}(t)`.
pub fn basis_eval(kv: &KnotVector, i: usize, order: usize, t: f64) -> Result<f64, SplineError> {
    basis_derivative(kv, i, order, t, 0)
}

/// `d^r/dt^r B_{i,order}(t)`; requires `r < order`.
pub fn basis_derivative(kv: &KnotVector, i: usize, order: usize, t: f64, r: usize) -> Result<f64, SplineError> {
    let row = kv.basis_derivatives(t, order, r)?;
    row.get(i).copied().ok_or(SplineError::IndexOutOfRange {
        index: i,
        max: row.len().saturating_sub(1),
    })
}

/// B-spline curve in R³.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineCurve {
    knots: KnotVector,
    control_points: Vec<Vector3<f64>>,
}

impl BSplineCurve {
    pub fn new(knots: KnotVector, control_points: Vec<Vector3<f64>>) -> Result<Self, SplineError> {
        let expected = knots.basis_count();
        if control_points.len() != expected {
            return Err(SplineError::ControlPointCount { expected, got: control_points.len() });
        }
        Ok(Self { knots, control_points })
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn order(&self) -> usize {
        self.knots.order
    }

    pub fn control_points(&self) -> &[Vector3<f64>] {
        &self.control_points
    }

    pub fn domain(&self) -> (f64, f64) {
        self.knots.domain()
    }

    /// `r`-th derivative of the curve at `t`.
    pub fn eval(&self, t: f64, r: usize) -> Result<Vector3<f64>, SplineError> {
        let (lo, hi) = self.domain();
        if !(lo..=hi).contains(&t) {
            return Err(SplineError::OutOfDomain { t, lo, hi });
        }
        let row = self.knots.basis_derivatives(t, self.order(), r)?;
        Ok(row
            .iter()
            .zip(&self.control_points)
            .fold(Vector3::zeros(), |acc, (b, p)| acc + p * *b))
    }

    /// `∫ ||curve^(r)(t)||² dt` over the domain, by Gauss–Legendre per span.
    pub fn derivative_energy(&self, r: usize) -> Result<f64, SplineError> {
        let (nodes, weights) = gauss_legendre(self.order() + 1);
        let mut total = 0.0;
        for (a, b) in self.knots.spans() {
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in nodes.iter().zip(&weights) {
                total += w * half * self.eval(mid + half * x, r)?.norm_squared();
            }
        }
        Ok(total)
    }
}

/// Waypoints with strictly increasing time stamps.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointSet {
    points: Vec<Vector3<f64>>,
    times: Vec<f64>,
}

impl WaypointSet {
    pub fn new(points: Vec<Vector3<f64>>, times: Vec<f64>) -> Result<Self, SplineError> {
        if points.len() != times.len() {
            return Err(SplineError::WaypointLength { points: points.len(), times: times.len() });
        }
        if points.len() < 2 {
            return Err(SplineError::TooFewWaypoints { got: points.len() });
        }
        if let Some(i) = times.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(SplineError::NonIncreasingTimes { index: i + 1 });
        }
        Ok(Self { points, times })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        self.times[self.times.len() - 1]
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-like initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Equality-constrained quadratic fit of control points:
/// minimize `∫ ||ξ'(t)||² dt` subject to `ξ(t_k) = w_k` for every waypoint.
#[derive(Debug, Clone)]
pub struct TrajectoryProblem {
    knots: KnotVector,
    gram: DMatrix<f64>,
    constraints: DMatrix<f64>,
    targets: DMatrix<f64>,
}

impl TrajectoryProblem {
    pub fn new(wp: &WaypointSet, order: usize, n_ctrl: usize) -> Result<Self, SplineError> {
        Self::with_quadrature(wp, order, n_ctrl, order + 1)
    }

    /// Same problem with `nodes` Gauss–Legendre points per knot span.
    pub fn with_quadrature(wp: &WaypointSet, order: usize, n_ctrl: usize, nodes: usize) -> Result<Self, SplineError> {
        let required = wp.points.len();
        if n_ctrl < required {
            return Err(SplineError::InfeasibleConstraints { rank: n_ctrl, required });
        }
        if order < 2 {
            return Err(SplineError::OrderTooHigh { deriv: 1, order });
        }
        let knots = KnotVector::clamped_uniform(wp.start_time(), wp.end_time(), n_ctrl, order)?;

        let (xs, ws) = gauss_legendre(nodes);
        let mut gram = DMatrix::zeros(n_ctrl, n_ctrl);
        for (a, b) in knots.spans() {
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in xs.iter().zip(&ws) {
                let d = knots.basis_derivatives(mid + half * x, order, 1)?;
                let wt = w * half;
                for i in 0..n_ctrl {
                    if d[i] == 0.0 {
                        continue;
                    }
                    for j in 0..n_ctrl {
                        gram[(i, j)] += wt * d[i] * d[j];
                    }
                }
            }
        }

        let mut constraints = DMatrix::zeros(required, n_ctrl);
        let mut targets = DMatrix::zeros(required, 3);
        for (k, (p, &t)) in wp.points.iter().zip(&wp.times).enumerate() {
            let row = knots.basis_derivatives(t, order, 0)?;
            for (i, b) in row.into_iter().enumerate() {
                constraints[(k, i)] = b;
            }
            for c in 0..3 {
                targets[(k, c)] = p[c];
            }
        }
        Ok(Self { knots, gram, constraints, targets })
    }

    /// `G_ij = ∫ B_i'(t) B_j'(t) dt`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Basis values at the waypoint times, one row per waypoint.
    pub fn constraints(&self) -> &DMatrix<f64> {
        &self.constraints
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    /// Solves the KKT system; returns the curve and the multipliers
    /// (one column per coordinate).
    pub fn solve_with_multipliers(&self) -> Result<(BSplineCurve, DMatrix<f64>), SplineError> {
        let n = self.gram.nrows();
        let rows = self.constraints.nrows();
        let rank = self.constraints.clone().svd(false, false).rank(1e-10);
        if rank < rows {
            return Err(SplineError::InfeasibleConstraints { rank, required: rows });
        }

        let size = n + rows;
        let mut kkt = DMatrix::zeros(size, size);
        kkt.view_mut((0, 0), (n, n)).copy_from(&(&self.gram * 2.0));
        kkt.view_mut((0, n), (n, rows)).copy_from(&self.constraints.transpose());
        kkt.view_mut((n, 0), (rows, n)).copy_from(&self.constraints);
        let mut rhs = DMatrix::zeros(size, 3);
        rhs.view_mut((n, 0), (rows, 3)).copy_from(&self.targets);

        let lu = kkt.clone().full_piv_lu();
        if !lu.is_invertible() {
            return Err(SplineError::SingularKkt);
        }
        let mut sol = lu.solve(&rhs).ok_or(SplineError::SingularKkt)?;
        // one step of iterative refinement
        let residual = &rhs - &kkt * &sol;
        if let Some(corr) = lu.solve(&residual) {
            sol += corr;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(SplineError::SingularKkt);
        }
        let points = (0..n).map(|i| Vector3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)])).collect();
        let multipliers = sol.rows(n, rows).into_owned();
        Ok((BSplineCurve::new(self.knots.clone(), points)?, multipliers))
    }

    pub fn solve(&self) -> Result<BSplineCurve, SplineError> {
        self.solve_with_multipliers().map(|(c, _)| c)
    }

    /// Value of the quadratic cost for a set of control points.
    pub fn cost(&self, curve: &BSplineCurve) -> f64 {
        (0..3)
            .map(|c| {
                let p = nalgebra::DVector::from_iterator(curve.control_points.len(), curve.control_points.iter().map(|v| v[c]));
                (p.transpose() * &self.gram * &p)[(0, 0)]
            })
            .sum()
    }
}

/// Minimum-velocity-energy clamped B-spline of the given order through the
/// waypoints, with `n_ctrl` control points.
pub fn solve_trajectory(wp: &WaypointSet, order: usize, n_ctrl: usize) -> Result<BSplineCurve, SplineError> {
    TrajectoryProblem::new(wp, order, n_ctrl)?.solve()
}

/// Coefficients of the degree-9 rest-to-rest step `s ↦ S(s)` on `[0, 1]`
/// with `S(0) = 0`, `S(1) = 1` and derivatives 1 through 4 zero at both ends.
const REST_TO_REST_STEP: [f64; 10] = [0.0, 0.0, 0.0, 0.0, 0.0, 126.0, -420.0, 540.0, -315.0, 70.0];

/// Polynomial `z4(t) = tan(psi(t)/2)` moving rest-to-rest between two yaw
/// angles.
#[derive(Debug, Clone, PartialEq)]
pub struct YawProfile {
    t0: f64,
    duration: f64,
    start: f64,
    delta: f64,
}

impl YawProfile {
    /// Polynomial coefficients of `z4` in the normalized time
    /// `s = (t - t0) / duration`, lowest power first.
    pub fn coefficients(&self) -> [f64; 10] {
        let mut c = REST_TO_REST_STEP.map(|c| c * self.delta);
        c[0] += self.start;
        c
    }

    pub fn start_time(&self) -> f64 {
        self.t0
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// `r`-th time derivative of `z4`. Outside the interval the profile is
    /// held at its end value.
    pub fn eval(&self, t: f64, r: usize) -> f64 {
        let s = ((t - self.t0) / self.duration).clamp(0.0, 1.0);
        let mut coeffs = REST_TO_REST_STEP.to_vec();
        for _ in 0..r {
            coeffs = coeffs.iter().enumerate().skip(1).map(|(k, c)| c * k as f64).collect();
        }
        let step = coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c);
        let offset = if r == 0 { self.start } else { 0.0 };
        offset + self.delta * step / self.duration.powi(r as i32)
    }
}

/// Rest-to-rest yaw channel from `psi_start` to `psi_end` (radians) over
/// `[t0, tn]`.
pub fn yaw_profile(psi_start: f64, psi_end: f64, t0: f64, tn: f64) -> YawProfile {
    let a = (0.5 * psi_start).tan();
    let b = (0.5 * psi_end).tan();
    YawProfile { t0, duration: tn - t0, start: a, delta: b - a }
}

/// Sample times `t0, t0 + dt, ...` ending exactly at `tn`.
pub fn sample_times(t0: f64, tn: f64, dt: f64) -> Result<Vec<f64>, SplineError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(SplineError::InvalidStep { dt });
    }
    let steps = ((tn - t0) / dt - 1e-9).ceil().max(0.0) as usize;
    let mut times: Vec<f64> = (0..steps).map(|k| t0 + k as f64 * dt).collect();
    times.push(tn);
    Ok(times)
}

/// Flat output `(x, y, z, z4)` and its derivatives through order 4 at `t`.
pub fn flat_sample_at(curve: &BSplineCurve, yaw: &YawProfile, t: f64) -> Result<FlatSample, SplineError> {
    let mut derivs = [Vector4::zeros(); MAX_FLAT_DERIVATIVE + 1];
    for (r, d) in derivs.iter_mut().enumerate() {
        let p = curve.eval(t, r)?;
        *d = Vector4::new(p[0], p[1], p[2], yaw.eval(t, r));
    }
    Ok(FlatSample { t, derivs })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Flat(#[from] crate::flat_map::FlatError),
}

/// Dense flat trajectory at step `dt`. Fails if any sample would point the
/// thrust axis downward.
pub fn sample_flat_trajectory(
    curve: &BSplineCurve,
    yaw: &YawProfile,
    dt: f64,
    gravity: f64,
) -> Result<Vec<FlatSample>, SampleError> {
    let (t0, tn) = curve.domain();
    sample_times(t0, tn, dt)?
        .into_iter()
        .map(|t| {
            let s = flat_sample_at(curve, yaw, t)?;
            s.check(gravity)?;
            Ok(s)
        })
        .collect()
}
