//! TOML scenario files.
//!
//! ```toml
//! [trajectory]
//! waypoints = [[0.0, 0.0, 5.0], [0.4, 0.9, 6.0]]   # m
//! times = [0.0, 3.0]                               # s, strictly increasing
//! spline_order = 6                                 # degree + 1
//! control_points = 12
//! yaw_start = 0.0                                  # rad
//! yaw_end = 0.1745                                 # rad
//!
//! [control]
//! strategy = "combined"        # flat_angle | flat_position | combined
//! period = 0.01                # s
//! substep = 0.001              # s
//!
//! [wind]
//! kind = "ramp_gust"
//! direction = [0.7071067811865476, 0.7071067811865476, 0.0]
//! peak = 6.944444444444445     # m/s
//! start = 2.0                  # s
//! rise = 1.0
//! hold = 5.0
//! fall = 1.0
//! ```
//!
//! `[body]`, `[env]`, `[gains.torque]`, `[gains.attitude]` and
//! `[initial_perturbation]` are optional and default to the reference
//! vehicle, calm sea-level air and the reference tuning. A single waypoint
//! together with `duration` describes a hover hold.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::{ControllerGains, StrategyKind, DEFAULT_WINDUP_LIMIT};
use crate::rigid_body::{BodyParams, EnvParams, RigidState};
use crate::sim::{Scenario, SimError, WindProfile};
use crate::spline::{SplineError, WaypointSet};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("{}{field}: {message}", .line.map(|l| format!("line {l}, ")).unwrap_or_default())]
    Field { field: String, line: Option<usize>, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    pub waypoints: Vec<[f64; 3]>,
    #[serde(default)]
    pub times: Vec<f64>,
    /// Required for a single waypoint; otherwise must match the time span.
    pub duration: Option<f64>,
    #[serde(default = "default_order")]
    pub spline_order: usize,
    #[serde(default = "default_control_points")]
    pub control_points: usize,
    #[serde(default)]
    pub yaw_start: f64,
    #[serde(default)]
    pub yaw_end: f64,
}

fn default_order() -> usize {
    6
}

fn default_control_points() -> usize {
    12
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub strategy: StrategyKind,
    #[serde(default = "default_period")]
    pub period: f64,
    #[serde(default = "default_substep")]
    pub substep: f64,
    #[serde(default = "default_windup")]
    pub windup_limit: f64,
}

fn default_period() -> f64 {
    0.01
}

fn default_substep() -> f64 {
    0.001
}

fn default_windup() -> f64 {
    DEFAULT_WINDUP_LIMIT
}

impl Default for ControlSection {
    fn default() -> Self {
        Self { strategy: StrategyKind::Combined, period: default_period(), substep: default_substep(), windup_limit: default_windup() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSection {
    #[serde(default)]
    pub position: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default)]
    pub attitude: [f64; 3],
    #[serde(default)]
    pub body_rates: [f64; 3],
}

/// On-disk scenario; see the module docs for the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub trajectory: TrajectorySection,
    #[serde(default = "BodyParams::crazyflie")]
    pub body: BodyParams,
    #[serde(default)]
    pub env: EnvParams,
    #[serde(default)]
    pub gains: ControllerGains,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub wind: WindProfile,
    #[serde(default)]
    pub initial_perturbation: PerturbationSection,
}

/// Parsed scenario plus the SHA-256 of the bytes it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScenario {
    pub file: ScenarioFile,
    pub scenario: Scenario,
    pub digest: String,
}

pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Line of the first `key =` assignment, for pointing at a field.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn field_error(text: &str, field: &str, message: impl Into<String>) -> ScenarioError {
    let key = field.rsplit('.').next().unwrap_or(field);
    let key = key.split('[').next().unwrap_or(key);
    ScenarioError::Field { field: field.to_string(), line: key_line(text, key), message: message.into() }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            ScenarioError::Syntax { line, column, message: e.message().to_string() }
        })
    }

    /// Builds and validates the in-memory scenario. `text` is used only to
    /// attach line numbers to field errors.
    pub fn to_scenario(&self, text: &str) -> Result<Scenario, ScenarioError> {
        let tr = &self.trajectory;
        let points: Vec<Vector3<f64>> = tr.waypoints.iter().map(|p| Vector3::from(*p)).collect();
        if let Some((i, _)) = tr.waypoints.iter().enumerate().find(|(_, p)| !p.iter().all(|v| v.is_finite())) {
            return Err(field_error(text, &format!("trajectory.waypoints[{i}]"), "must be finite"));
        }
        let (points, times) = match points.len() {
            0 => return Err(field_error(text, "trajectory.waypoints", "at least one waypoint is required")),
            1 => {
                let duration = tr
                    .duration
                    .ok_or_else(|| field_error(text, "trajectory.duration", "required when holding a single waypoint"))?;
                if !(duration > 0.0 && duration.is_finite()) {
                    return Err(field_error(text, "trajectory.duration", format!("must be positive, got {duration}")));
                }
                let t0 = match tr.times.as_slice() {
                    [] => 0.0,
                    [t] => *t,
                    _ => return Err(field_error(text, "trajectory.times", "needs exactly one entry for a single waypoint")),
                };
                (vec![points[0], points[0]], vec![t0, t0 + duration])
            }
            _ => (points, tr.times.clone()),
        };
        let waypoints = WaypointSet::new(points, times).map_err(|e| match e {
            SplineError::NonIncreasingTimes { index } => {
                field_error(text, &format!("trajectory.times[{index}]"), "times must be strictly increasing")
            }
            SplineError::WaypointLength { points, times } => field_error(
                text,
                "trajectory.times",
                format!("{times} times given for {points} waypoints"),
            ),
            other => field_error(text, "trajectory", other.to_string()),
        })?;
        let span = waypoints.end_time() - waypoints.start_time();
        let duration = tr.duration.unwrap_or(span);

        let pert = &self.initial_perturbation;
        let scenario = Scenario {
            waypoints,
            spline_order: tr.spline_order,
            control_points: tr.control_points,
            yaw_start: tr.yaw_start,
            yaw_end: tr.yaw_end,
            body: self.body,
            env: self.env,
            gains: self.gains,
            strategy: self.control.strategy,
            wind: self.wind,
            duration,
            control_period: self.control.period,
            substep: self.control.substep,
            perturbation: RigidState {
                position: pert.position.into(),
                velocity: pert.velocity.into(),
                attitude: pert.attitude.into(),
                body_rates: pert.body_rates.into(),
            },
            windup_limit: self.control.windup_limit,
        };
        scenario.validate().map_err(|e| match e {
            SimError::Param(p) => {
                let section = if ["gravity", "air_density", "drag_coeff"].contains(&p.name) || p.name.starts_with("areas") {
                    "env"
                } else {
                    "body"
                };
                field_error(text, &format!("{section}.{}", p.name), format!("must be {}, got {}", p.expected, p.value))
            }
            SimError::Invalid(msg) if msg.starts_with("duration") => field_error(text, "trajectory.duration", msg),
            SimError::Invalid(msg) if msg.starts_with("wind") => field_error(text, "wind", msg),
            SimError::Invalid(msg) if msg.starts_with("gains") => {
                let field = msg.split_whitespace().next().unwrap_or("gains").to_string();
                field_error(text, &field, msg)
            }
            SimError::Invalid(msg) => field_error(text, "control", msg),
            other => field_error(text, "scenario", other.to_string()),
        })?;
        Ok(scenario)
    }

    /// Mirror of an in-memory scenario.
    pub fn from_scenario(s: &Scenario) -> Self {
        let p = &s.perturbation;
        Self {
            trajectory: TrajectorySection {
                waypoints: s.waypoints.points().iter().map(|v| [v[0], v[1], v[2]]).collect(),
                times: s.waypoints.times().to_vec(),
                duration: None,
                spline_order: s.spline_order,
                control_points: s.control_points,
                yaw_start: s.yaw_start,
                yaw_end: s.yaw_end,
            },
            body: s.body,
            env: s.env,
            gains: s.gains,
            control: ControlSection {
                strategy: s.strategy,
                period: s.control_period,
                substep: s.substep,
                windup_limit: s.windup_limit,
            },
            wind: s.wind,
            initial_perturbation: PerturbationSection {
                position: p.position.into(),
                velocity: p.velocity.into(),
                attitude: p.attitude.into(),
                body_rates: p.body_rates.into(),
            },
        }
    }
}

pub fn parse_scenario(text: &str) -> Result<LoadedScenario, ScenarioError> {
    let file = ScenarioFile::parse(text)?;
    let scenario = file.to_scenario(text)?;
    Ok(LoadedScenario { file, scenario, digest: digest(text.as_bytes()) })
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario, ScenarioError> {
    let bytes = std::fs::read(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    let text = String::from_utf8_lossy(&bytes);
    let file = ScenarioFile::parse(&text)?;
    let scenario = file.to_scenario(&text)?;
    Ok(LoadedScenario { file, scenario, digest: digest(&bytes) })
}
