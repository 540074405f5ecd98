//! Longitudinal slip control workbench for a rear-driven electric race car.
//!
//! The crate contains a fixed-step plant with a reduced magic-formula tire,
//! an unconstrained MPC on slip velocities solved in closed form, an
//! extremum-seeking estimator of the force-maximizing slip, baseline PID and
//! sliding-mode estimators, scripted maneuvers with metrics, and a
//! preference-driven tuner for the MPC hyper-parameters.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod baselines;
pub mod config;
pub mod error;
pub mod esc;
pub mod flags;
pub mod metrics;
pub mod mpc;
pub mod oracle;
pub mod plant;
pub mod scenario;
pub mod tire;
pub mod trace;
pub mod tuner;

pub use error::{ConfigError, MpcError, SimError, TunerError};
