//! Scripted maneuvers and the closed loop of plant, supervisor, estimator
//! and tracking controller.

use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::{pid_step, PidState, SlidingModeEstimator};
use crate::config::{parse_toml, SimConfig};
use crate::error::{ConfigError, SimError};
use crate::esc::{lateral_scale, sign_for_mode, ExtremumSeeker, Supervisor, SupervisorSignals};
use crate::flags::StatusFlags;
use crate::mpc::{self, reference_from_kappa, MpcController, MpcGains};
use crate::plant::{plant_step, slip_ratio, ExogenousInputs, Measurement, PlantState, SlipMode};
use crate::tire::optimal_slip;
use crate::trace::{Trace, TraceRow};

/// Piecewise schedule over time, given as `[t, value]` breakpoints. Values
/// are held before the first and after the last breakpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub points: Vec<[f64; 2]>,
    /// Hold each value until the next breakpoint instead of interpolating.
    #[serde(default)]
    pub step: bool,
}

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Self { points: vec![[0.0, v]], step: false }
    }

    pub fn at(&self, t: f64) -> f64 {
        let p = &self.points;
        if p.is_empty() {
            return 0.0;
        }
        if t <= p[0][0] {
            return p[0][1];
        }
        for w in p.windows(2) {
            let ([t0, v0], [t1, v1]) = (w[0], w[1]);
            if t < t1 {
                if self.step || t1 == t0 {
                    return v0;
                }
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        p[p.len() - 1][1]
    }

    fn validate(&self, name: &'static str) -> Result<(), ConfigError> {
        if self.points.is_empty() {
            return Err(ConfigError::invalid(name, "schedule needs at least one point"));
        }
        if self.points.windows(2).any(|w| w[1][0] < w[0][0]) {
            return Err(ConfigError::invalid(name, "breakpoint times must be non-decreasing"));
        }
        Ok(())
    }
}

/// How the scripted driver requests motor torque.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriverProgram {
    /// Torque versus time.
    Schedule { torque: Schedule },
    /// Full drive up to `high`, full regeneration down to `low`, repeated.
    /// Torque changes are rate limited to `ramp_rate` (N m/s).
    SpeedCycle { low: f64, high: f64, drive_torque: f64, brake_torque: f64, ramp_rate: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Mpc,
    Pid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Esc,
    Sliding,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadLoad {
    pub rolling: f64,
    /// N per (m/s)^2.
    pub drag: f64,
}

impl Default for RoadLoad {
    fn default() -> Self {
        Self { rolling: 100.0, drag: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorNoise {
    /// Standard deviation of the accelerometer (m/s^2).
    pub accel: f64,
    /// Standard deviation of the wheel speed sensors (rad/s).
    pub wheel_speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Maneuver {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub duration: f64,
    pub initial_speed: f64,
    pub driver: DriverProgram,
    #[serde(default = "zero_schedule")]
    pub brake: Schedule,
    #[serde(default = "unit_schedule")]
    pub mu: Schedule,
    #[serde(default = "zero_schedule")]
    pub lateral: Schedule,
    #[serde(default = "default_controller")]
    pub controller: ControllerKind,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
    /// Slip reference magnitude for the fixed estimator.
    #[serde(default = "default_fixed_ref")]
    pub fixed_kappa_ref: f64,
    #[serde(default)]
    pub road_load: RoadLoad,
    #[serde(default)]
    pub noise: SensorNoise,
    #[serde(default)]
    pub seed: u64,
}

fn zero_schedule() -> Schedule {
    Schedule::constant(0.0)
}
fn unit_schedule() -> Schedule {
    Schedule::constant(1.0)
}
fn default_controller() -> ControllerKind {
    ControllerKind::Mpc
}
fn default_estimator() -> EstimatorKind {
    EstimatorKind::Esc
}
fn default_fixed_ref() -> f64 {
    0.044
}

impl Maneuver {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let m: Maneuver = parse_toml(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("maneuver serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.duration > 0.0) {
            return Err(ConfigError::invalid("duration", "must be positive"));
        }
        if !(self.initial_speed >= 0.0) {
            return Err(ConfigError::invalid("initial_speed", "must be non-negative"));
        }
        self.brake.validate("brake")?;
        self.mu.validate("mu")?;
        self.lateral.validate("lateral")?;
        if let DriverProgram::Schedule { torque } = &self.driver {
            torque.validate("driver.torque")?;
        }
        if self.brake.points.iter().any(|p| p[1] < 0.0) {
            return Err(ConfigError::invalid("brake", "brake torque must be non-negative"));
        }
        if self.mu.points.iter().any(|p| p[1] <= 0.0) {
            return Err(ConfigError::invalid("mu", "friction must be positive"));
        }
        if self.noise.accel < 0.0 || self.noise.wheel_speed < 0.0 {
            return Err(ConfigError::invalid("noise", "standard deviations must be non-negative"));
        }
        Ok(())
    }

    /// Number of steps for the given sample time.
    pub fn steps(&self, sample_time: f64) -> usize {
        (self.duration / sample_time).round() as usize
    }
}

/// Built-in maneuvers as `(id, definition)`.
pub const FIXTURES: [(&str, &str); 4] = [
    ("fig5-tuning", include_str!("../maneuvers/fig5-tuning.toml")),
    ("fig6-brake-mu-step", include_str!("../maneuvers/fig6-brake-mu-step.toml")),
    ("fig7-cycles", include_str!("../maneuvers/fig7-cycles.toml")),
    ("coast", include_str!("../maneuvers/coast.toml")),
];

pub fn fixture_ids() -> Vec<&'static str> {
    FIXTURES.iter().map(|(id, _)| *id).collect()
}

/// Looks up a built-in maneuver; unknown names list the closest ids first.
pub fn fixture(id: &str) -> Result<Maneuver, ConfigError> {
    match FIXTURES.iter().find(|(name, _)| *name == id) {
        Some((_, text)) => Maneuver::parse(text),
        None => {
            let mut names = fixture_ids();
            names.sort_by_key(|n| (!n.contains(id), edit_distance(n, id)));
            Err(ConfigError::UnknownManeuver {
                name: id.to_string(),
                suggestions: names.into_iter().map(str::to_string).collect(),
            })
        }
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut prev = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cur = row[j + 1];
            row[j + 1] = (prev + usize::from(ca != *cb)).min(row[j] + 1).min(cur + 1);
            prev = cur;
        }
    }
    row[b.len()]
}

enum Estimator {
    Esc(ExtremumSeeker),
    Sliding(SlidingModeEstimator),
    Fixed(f64),
}

struct Driver {
    program: DriverProgram,
    braking: bool,
    output: f64,
}

impl Driver {
    fn torque(&mut self, t: f64, v_x: f64, dt: f64) -> f64 {
        match &self.program {
            DriverProgram::Schedule { torque } => torque.at(t),
            DriverProgram::SpeedCycle { low, high, drive_torque, brake_torque, ramp_rate } => {
                if self.braking && v_x <= *low {
                    self.braking = false;
                } else if !self.braking && v_x >= *high {
                    self.braking = true;
                }
                let target = if self.braking { -brake_torque.abs() } else { drive_torque.abs() };
                let max_change = ramp_rate * dt;
                self.output += (target - self.output).clamp(-max_change, max_change);
                self.output
            }
        }
    }
}

/// Runs a maneuver, synthesizing MPC gains when the MPC is selected.
pub fn run_scenario(m: &Maneuver, cfg: &SimConfig) -> Result<Trace, SimError> {
    let gains = match m.controller {
        ControllerKind::Mpc => Some(Arc::new(mpc::synthesize(&cfg.vehicle, &cfg.mpc.cost())?)),
        ControllerKind::Pid => None,
    };
    run_scenario_with_gains(m, cfg, gains)
}

/// Runs a maneuver with precomputed gains (required for the MPC).
pub fn run_scenario_with_gains(m: &Maneuver, cfg: &SimConfig, gains: Option<Arc<MpcGains>>) -> Result<Trace, SimError> {
    m.validate()?;
    cfg.validate()?;
    let params = &cfg.vehicle;
    let tire = cfg.tire.build()?;
    let dt = params.sample_time;
    let r_w = params.wheel_radius;

    let mut mpc = match m.controller {
        ControllerKind::Mpc => {
            let gains = gains.ok_or_else(|| ConfigError::invalid("mpc", "gains are required for the MPC controller"))?;
            if gains.horizon != cfg.mpc.horizon {
                return Err(ConfigError::invalid("mpc.horizon", "does not match the supplied gains").into());
            }
            Some(MpcController::new(gains, params, cfg.mpc.limits()))
        }
        ControllerKind::Pid => None,
    };
    let mut pid = PidState::default();
    let mut estimator = match m.estimator {
        EstimatorKind::Esc => Estimator::Esc(ExtremumSeeker::new(cfg.esc.clone(), dt)),
        EstimatorKind::Sliding => Estimator::Sliding(SlidingModeEstimator::new(cfg.sliding.clone(), dt)),
        EstimatorKind::Fixed => Estimator::Fixed(m.fixed_kappa_ref),
    };
    let mut supervisor = Supervisor::new(cfg.supervisor.clone());
    let mut driver = Driver { program: m.driver.clone(), braking: false, output: 0.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    let accel_noise = Normal::new(0.0, m.noise.accel).expect("validated");
    let wheel_noise = Normal::new(0.0, m.noise.wheel_speed).expect("validated");

    let mut state = PlantState::rolling(m.initial_speed, params);
    let mut trace = Trace {
        maneuver: m.name.clone(),
        sample_time: dt,
        wheel_radius: r_w,
        kappa_star: optimal_slip(&tire, params.static_rear_load_per_wheel),
        rows: Vec::with_capacity(m.steps(dt)),
    };
    let mut kappa_ref_signed = 0.0;
    let mut controller_out = 0.0;
    let mut last_command = 0.0;

    for step in 0..m.steps(dt) {
        let t = step as f64 * dt;
        let mu = m.mu.at(t);
        let a_y = m.lateral.at(t);
        let t_b = m.brake.at(t);
        let ex = ExogenousInputs {
            brake_torque: t_b,
            lateral_accel: a_y,
            road_friction: mu,
            road_load: m.road_load.rolling + m.road_load.drag * state.v_x * state.v_x,
        };

        let truth = state.sensed();
        let sensed = Measurement {
            omega_l: truth.omega_l + wheel_noise.sample(&mut rng),
            omega_r: truth.omega_r + wheel_noise.sample(&mut rng),
            v_x: truth.v_x,
            a_x: truth.a_x + accel_noise.sample(&mut rng),
        };

        let driver_torque = driver.torque(t, sensed.v_x, dt);
        let mode = SlipMode::from_torque(driver_torque);
        let sign = mode.sign();
        let slip_l = slip_ratio(sensed.omega_l, sensed.v_x, r_w, mode).value;
        let slip_r = slip_ratio(sensed.omega_r, sensed.v_x, r_w, mode).value;
        let kappa_tilde = sign * 0.5 * (slip_l + slip_r);
        let accel = sign * sensed.a_x;

        let act = supervisor.step(&SupervisorSignals {
            kappa_l: slip_l,
            kappa_r: slip_r,
            kappa_ref: kappa_ref_signed,
            driver_torque,
            controller_torque: controller_out,
            lateral_accel: a_y,
            brakes_applied: t_b > 0.0,
            t,
        });
        if act.mpc_engaged {
            if let Some(c) = mpc.as_mut() {
                c.reset_input(last_command);
            }
            pid = PidState::preload(&cfg.pid, last_command);
            match &mut estimator {
                Estimator::Esc(e) => e.reset_filters(kappa_tilde, accel),
                Estimator::Sliding(s) => s.reset_history(),
                Estimator::Fixed(_) => {}
            }
        }

        let (kappa_mag, kappa_hat, zeta, xi) = match &mut estimator {
            Estimator::Esc(e) => {
                let out = e.step(kappa_tilde, accel, act.esc_active);
                (out.kappa_ref, out.kappa_hat, out.zeta, out.xi)
            }
            Estimator::Sliding(s) => {
                let k = s.step(kappa_tilde, accel, act.esc_active);
                (k, k, 0.0, 0.0)
            }
            Estimator::Fixed(k) => (*k, *k, 0.0, 0.0),
        };
        let scaled = lateral_scale(kappa_mag, a_y, &cfg.lateral);
        kappa_ref_signed = sign_for_mode(scaled, mode);
        let ref_l = reference_from_kappa(kappa_ref_signed, sensed.v_x, sensed.omega_l, r_w, mode);
        let ref_r = reference_from_kappa(kappa_ref_signed, sensed.v_x, sensed.omega_r, r_w, mode);

        match mpc.as_mut() {
            Some(c) => {
                if act.mpc_active {
                    controller_out = c.step(&sensed, Vector2::new(ref_l, ref_r));
                } else {
                    c.observe(&sensed);
                }
            }
            None => {
                if act.mpc_active {
                    let v_slip = 0.5 * (sensed.omega_l + sensed.omega_r) * r_w - sensed.v_x;
                    let error = 0.5 * (ref_l + ref_r) - v_slip;
                    controller_out = pid_step(&cfg.pid, &mut pid, error, dt);
                }
            }
        }
        let command = if act.mpc_active { controller_out } else { driver_torque };
        last_command = command;

        let (next, report) = plant_step(&state, command, &ex, params, &tire).map_err(|e| match e {
            SimError::NonFinite { t, dump, .. } => SimError::NonFinite { step, t, dump },
            other => other,
        })?;

        let mut flags = report.flags;
        flags.set(StatusFlags::MPC_ACTIVE, act.mpc_active);
        flags.set(StatusFlags::ESC_ACTIVE, act.esc_active);
        flags.set(StatusFlags::BRAKING, mode == SlipMode::Braking);
        flags.set(StatusFlags::TORQUE_SATURATED, act.mpc_active && (command <= cfg.mpc.torque_min || command >= cfg.mpc.torque_max));
        flags.set(StatusFlags::LATERAL_SCALED, scaled != kappa_mag);
        trace.rows.push(TraceRow {
            t,
            omega_l: state.omega_l,
            omega_r: state.omega_r,
            v_x: state.v_x,
            kappa_l: report.kappa_l,
            kappa_r: report.kappa_r,
            fx_l: report.fx_l,
            fx_r: report.fx_r,
            t_m: command,
            t_b,
            flags: flags.bits(),
            kappa_ref: kappa_ref_signed,
            kappa_hat,
            zeta,
            xi,
            a_x: state.a_x,
            a_y,
            mu,
            driver_torque,
            v_slip_ref: 0.5 * (ref_l + ref_r),
        });
        state = next;
    }
    Ok(trace)
}
