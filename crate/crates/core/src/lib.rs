//! Flatness-based trajectory generation and tracking control for quadcopters.
//!
//! The flat output `z = (x, y, z, tan(psi/2))` is parametrized by a clamped
//! B-spline fitted through timed waypoints ([`spline`]), mapped to full state
//! and input references ([`flat_map`]), and tracked by computed-torque and
//! feedback-linearizing controllers ([`control`]) against a nonlinear
//! rigid-body model with drag and wind ([`rigid_body`], [`sim`]).

// `!(x > 0.0)` is used on purpose so NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod flat_map;
pub mod cli;
pub mod rigid_body;
pub mod scenario;
pub mod sim;
pub mod spline;
