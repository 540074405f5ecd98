//! Shared configuration file: vehicle, tire, controller, estimator and
//! supervisor parameters in TOML key-value form. Every key is optional;
//! missing keys take the reference values.
//!
//! ```toml
//! [vehicle]
//! mass = 300.0
//! delay_actuation_steps = 2
//!
//! [tire]
//! optimal_slip = 0.044   # calibrates the stiffness factor
//!
//! [mpc]
//! p = 250.0
//! q = 250.0
//! horizon = 1450
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{PidConfig, SlidingModeEstimatorConfig};
use crate::error::ConfigError;
use crate::esc::{EscConfig, LateralScaling, SupervisorConfig};
use crate::mpc::{CostConfig, TorqueLimits};
use crate::plant::VehicleParams;
use crate::tire::TireModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TireConfig {
    pub shape_factor: f64,
    pub peak_factor: f64,
    pub curvature_factor: f64,
    /// Slip of peak force; the stiffness factor is solved from it unless
    /// `stiffness_factor` is given.
    pub optimal_slip: f64,
    pub stiffness_factor: Option<f64>,
    pub friction_scale: f64,
}

impl Default for TireConfig {
    fn default() -> Self {
        Self {
            shape_factor: 1.65,
            peak_factor: 1.0,
            curvature_factor: 0.0,
            optimal_slip: 0.044,
            stiffness_factor: None,
            friction_scale: 1.0,
        }
    }
}

impl TireConfig {
    pub fn build(&self) -> Result<TireModel, ConfigError> {
        if !(self.shape_factor > 1.0) {
            return Err(ConfigError::invalid("tire.shape_factor", "must exceed 1"));
        }
        if !(self.curvature_factor < 1.0) {
            return Err(ConfigError::invalid("tire.curvature_factor", "must be below 1"));
        }
        if !(self.peak_factor >= 0.0 && self.friction_scale >= 0.0) {
            return Err(ConfigError::invalid("tire.peak_factor", "must be non-negative"));
        }
        let tire = match self.stiffness_factor {
            Some(b) => TireModel {
                stiffness_factor: b,
                shape_factor: self.shape_factor,
                peak_factor: self.peak_factor,
                curvature_factor: self.curvature_factor,
                friction_scale: 1.0,
            },
            None => {
                if !(self.optimal_slip > 0.0) {
                    return Err(ConfigError::invalid("tire.optimal_slip", "must be positive"));
                }
                TireModel::calibrated(self.shape_factor, self.peak_factor, self.curvature_factor, self.optimal_slip)
            }
        };
        Ok(tire.with_friction(self.friction_scale))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSettings {
    /// Terminal weight scalar, `P = p I`.
    pub p: f64,
    /// Stage weight scalar, `Q = q I`.
    pub q: f64,
    pub r: f64,
    pub horizon: usize,
    pub torque_min: f64,
    pub torque_max: f64,
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self { p: 250.0, q: 250.0, r: 1.0, horizon: 1450, torque_min: -250.0, torque_max: 250.0 }
    }
}

impl MpcSettings {
    pub fn cost(&self) -> CostConfig {
        CostConfig::scalar(self.p, self.q, self.r, self.horizon)
    }

    pub fn limits(&self) -> TorqueLimits {
        TorqueLimits { min: self.torque_min, max: self.torque_max }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub vehicle: VehicleParams,
    pub tire: TireConfig,
    pub mpc: MpcSettings,
    pub esc: EscConfig,
    pub lateral: LateralScaling,
    pub supervisor: SupervisorConfig,
    pub pid: PidConfig,
    pub sliding: SlidingModeEstimatorConfig,
}

impl SimConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.vehicle.validate()?;
        self.tire.build()?;
        if !(self.mpc.torque_min < self.mpc.torque_max) {
            return Err(ConfigError::invalid("mpc.torque_min", "must be below torque_max"));
        }
        self.mpc.cost().validate().map_err(|e| ConfigError::invalid("mpc", e.to_string()))?;
        self.esc.validate()?;
        self.lateral.validate()?;
        self.pid.validate()?;
        self.sliding.validate()?;
        Ok(())
    }
}

/// Deserializes TOML, mapping errors to 1-based line numbers.
pub(crate) fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0);
        ConfigError::Parse { line, message: e.message().to_string() }
    })
}
