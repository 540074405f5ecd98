//! Fixed-step longitudinal plant for a rear-driven car: two driven wheels on a
//! limited-slip differential, chassis speed, load transfer, downforce and
//! integer-step transport delays.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, SimError};
use crate::flags::StatusFlags;
use crate::tire::TireModel;

/// Denominator floor for slip ratios (m/s).
pub const LOW_SPEED_EPS: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlipMode {
    Braking,
    Driving,
}

impl SlipMode {
    /// +1 when driving, -1 when braking.
    pub fn sign(self) -> f64 {
        match self {
            SlipMode::Driving => 1.0,
            SlipMode::Braking => -1.0,
        }
    }

    pub fn from_torque(torque: f64) -> Self {
        if torque < 0.0 {
            SlipMode::Braking
        } else {
            SlipMode::Driving
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slip {
    pub value: f64,
    /// The denominator fell below [`LOW_SPEED_EPS`] and the fallback was used.
    pub low_speed: bool,
}

/// Longitudinal slip ratio. Braking normalizes the slip velocity by the vehicle
/// speed, driving by the wheel surface speed. Below [`LOW_SPEED_EPS`] the slip
/// velocity is divided by the floor instead.
pub fn slip_ratio(omega: f64, v_x: f64, r_w: f64, mode: SlipMode) -> Slip {
    let surface = omega * r_w;
    let v_slip = surface - v_x;
    let denom = match mode {
        SlipMode::Braking => v_x,
        SlipMode::Driving => surface,
    };
    if denom > LOW_SPEED_EPS {
        Slip { value: v_slip / denom, low_speed: false }
    } else {
        Slip { value: v_slip / LOW_SPEED_EPS, low_speed: true }
    }
}

/// Slip seen by the tire: the braking definition when the wheel surface is
/// slower than the road, the driving one otherwise.
pub fn physical_slip(omega: f64, v_x: f64, r_w: f64) -> Slip {
    let mode = if omega * r_w >= v_x { SlipMode::Driving } else { SlipMode::Braking };
    slip_ratio(omega, v_x, r_w, mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub mass: f64,
    pub wheel_inertia: f64,
    pub wheel_radius: f64,
    pub gear_ratio: f64,
    pub sample_time: f64,
    pub static_rear_load_per_wheel: f64,
    pub load_transfer_gain: f64,
    pub downforce_gain: f64,
    pub lsd_preload: f64,
    pub lsd_torque_sensitivity: f64,
    pub lsd_viscous_gain: f64,
    pub delay_actuation_steps: usize,
    pub delay_measurement_steps: usize,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 300.0,
            wheel_inertia: 1.2,
            wheel_radius: 0.25,
            gear_ratio: 3.5,
            sample_time: 0.005,
            static_rear_load_per_wheel: 810.0,
            load_transfer_gain: 28.0,
            downforce_gain: 0.8,
            lsd_preload: 20.0,
            lsd_torque_sensitivity: 0.1,
            lsd_viscous_gain: 50.0,
            delay_actuation_steps: 2,
            delay_measurement_steps: 1,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("mass", self.mass),
            ("wheel_inertia", self.wheel_inertia),
            ("wheel_radius", self.wheel_radius),
            ("gear_ratio", self.gear_ratio),
            ("sample_time", self.sample_time),
            ("static_rear_load_per_wheel", self.static_rear_load_per_wheel),
            ("load_transfer_gain", self.load_transfer_gain),
            ("downforce_gain", self.downforce_gain),
            ("lsd_preload", self.lsd_preload),
            ("lsd_torque_sensitivity", self.lsd_torque_sensitivity),
            ("lsd_viscous_gain", self.lsd_viscous_gain),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::invalid(name, format!("must be positive, got {value}")));
            }
        }
        Ok(())
    }
}

/// Clutch torque of the limited-slip differential: preload plus a
/// torque-sensing term, capped by a viscous term in the wheel speed
/// difference. Positive values add to the left shaft.
///
/// The clutch always opposes the speed difference, moving torque from the
/// faster wheel to the slower one.
pub fn lsd_clutch_torque(omega_l: f64, omega_r: f64, t_m: f64, params: &VehicleParams) -> f64 {
    let diff = omega_l - omega_r;
    if diff == 0.0 {
        return 0.0;
    }
    let locking = params.lsd_preload + params.lsd_torque_sensitivity * (params.gear_ratio * t_m).abs();
    let viscous = params.lsd_viscous_gain * diff.abs();
    -diff.signum() * locking.min(viscous)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShaftTorques {
    pub left: f64,
    pub right: f64,
    pub clutch: f64,
}

pub fn lsd_split(omega_l: f64, omega_r: f64, t_m: f64, params: &VehicleParams) -> ShaftTorques {
    let half = 0.5 * params.gear_ratio * t_m;
    let clutch = lsd_clutch_torque(omega_l, omega_r, t_m, params);
    ShaftTorques { left: half + clutch, right: half - clutch, clutch }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerticalLoads {
    pub left: f64,
    pub right: f64,
    pub wheel_lift: bool,
}

/// Rear wheel loads from static load, longitudinal load transfer and downforce.
pub fn vertical_loads(v_x: f64, a_x: f64, params: &VehicleParams) -> VerticalLoads {
    let raw = params.static_rear_load_per_wheel
        + params.load_transfer_gain * a_x
        + 0.5 * params.downforce_gain * v_x * v_x;
    let fz = raw.max(0.0);
    VerticalLoads { left: fz, right: fz, wheel_lift: raw < 0.0 }
}

/// What the car's sensors report: wheel speeds, vehicle speed and the
/// longitudinal accelerometer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub omega_l: f64,
    pub omega_r: f64,
    pub v_x: f64,
    pub a_x: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExogenousInputs {
    /// Friction brake torque per wheel (N m), non-negative.
    pub brake_torque: f64,
    pub lateral_accel: f64,
    /// Road friction coefficient multiplying the tire's own friction scale.
    pub road_friction: f64,
    pub road_load: f64,
}

impl Default for ExogenousInputs {
    fn default() -> Self {
        Self { brake_torque: 0.0, lateral_accel: 0.0, road_friction: 1.0, road_load: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantState {
    pub omega_l: f64,
    pub omega_r: f64,
    pub v_x: f64,
    /// Chassis acceleration over the last step, used for load transfer and
    /// reported by the accelerometer.
    pub a_x: f64,
    pub t: f64,
    pub actuation: VecDeque<f64>,
    pub measurement: VecDeque<Measurement>,
}

impl PlantState {
    /// Rolling without slip at `v_x`, empty delay lines.
    pub fn rolling(v_x: f64, params: &VehicleParams) -> Self {
        let omega = v_x / params.wheel_radius;
        let m = Measurement { omega_l: omega, omega_r: omega, v_x, a_x: 0.0 };
        Self {
            omega_l: omega,
            omega_r: omega,
            v_x,
            a_x: 0.0,
            t: 0.0,
            actuation: VecDeque::from(vec![0.0; params.delay_actuation_steps]),
            measurement: VecDeque::from(vec![m; params.delay_measurement_steps]),
        }
    }

    pub fn measure(&self) -> Measurement {
        Measurement { omega_l: self.omega_l, omega_r: self.omega_r, v_x: self.v_x, a_x: self.a_x }
    }

    /// Sensor output available to controllers at the current step.
    pub fn sensed(&self) -> Measurement {
        self.measurement.front().copied().unwrap_or_else(|| self.measure())
    }

    fn is_finite(&self) -> bool {
        [self.omega_l, self.omega_r, self.v_x, self.a_x].iter().all(|v| v.is_finite())
    }
}

/// Per-step quantities computed while advancing the plant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Motor torque that reached the differential this step.
    pub applied_torque: f64,
    pub kappa_l: f64,
    pub kappa_r: f64,
    pub fx_l: f64,
    pub fx_r: f64,
    pub loads: VerticalLoads,
    pub shafts: ShaftTorques,
    pub flags: StatusFlags,
}

/// Advances the plant one forward-Euler step.
///
/// `t_m` is the commanded motor torque; it reaches the wheels after
/// `delay_actuation_steps` steps.
pub fn plant_step(
    state: &PlantState,
    t_m: f64,
    ex: &ExogenousInputs,
    params: &VehicleParams,
    tire: &TireModel,
) -> Result<(PlantState, StepReport), SimError> {
    let mut next = state.clone();

    let applied = if params.delay_actuation_steps == 0 {
        t_m
    } else {
        next.actuation.push_back(t_m);
        next.actuation.pop_front().unwrap_or(0.0)
    };
    if params.delay_measurement_steps > 0 {
        next.measurement.push_back(state.measure());
        next.measurement.pop_front();
    }

    let mut flags = StatusFlags::empty();
    let r_w = params.wheel_radius;
    let slip_l = physical_slip(state.omega_l, state.v_x, r_w);
    let slip_r = physical_slip(state.omega_r, state.v_x, r_w);
    if slip_l.low_speed || slip_r.low_speed {
        flags |= StatusFlags::LOW_SPEED;
    }
    let loads = vertical_loads(state.v_x.max(0.0), state.a_x, params);
    if loads.wheel_lift {
        flags |= StatusFlags::WHEEL_LIFT;
    }
    let road_tire = tire.with_friction(tire.friction_scale * ex.road_friction);
    let fx_l = road_tire.force(slip_l.value, loads.left);
    let fx_r = road_tire.force(slip_r.value, loads.right);
    let shafts = lsd_split(state.omega_l, state.omega_r, applied, params);

    let dt = params.sample_time;
    let wheel_rate = |omega: f64, drive: f64, fx: f64| {
        let brake = if omega > 0.0 { ex.brake_torque } else { 0.0 };
        (drive - brake - r_w * fx) / params.wheel_inertia
    };
    let a_x = (fx_l + fx_r - ex.road_load) / params.mass;
    next.omega_l = state.omega_l + dt * wheel_rate(state.omega_l, shafts.left, fx_l);
    next.omega_r = state.omega_r + dt * wheel_rate(state.omega_r, shafts.right, fx_r);
    next.v_x = state.v_x + dt * a_x;
    next.a_x = a_x;
    next.t = state.t + dt;
    if next.v_x < 0.0 {
        next.v_x = 0.0;
    }
    if ex.brake_torque > 0.0 {
        // friction brakes cannot drive a wheel backwards
        next.omega_l = next.omega_l.max(0.0);
        next.omega_r = next.omega_r.max(0.0);
    }

    if !next.is_finite() {
        return Err(SimError::NonFinite {
            step: 0,
            t: state.t,
            dump: format!("{state:?} -> {next:?}"),
        });
    }

    let report = StepReport {
        applied_torque: applied,
        kappa_l: slip_l.value,
        kappa_r: slip_r.value,
        fx_l,
        fx_r,
        loads,
        shafts,
        flags,
    };
    Ok((next, report))
}
