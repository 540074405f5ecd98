//! Extremum-seeking estimation of the force-maximizing slip.
//!
//! The slip reference is the current estimate plus a small sinusoid. The
//! measured longitudinal acceleration and the slip estimated from the
//! measured wheel speeds are both high-pass filtered; both pass through the
//! same sensing path, so their product carries the local gradient times a
//! non-negative factor regardless of the loop's phase lag. A saturating
//! integrator turns that product into the estimate.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::plant::SlipMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EscConfig {
    /// Perturbation amplitude (slip).
    pub amplitude: f64,
    /// Perturbation frequency (rad/s); also the high-pass cutoff.
    pub frequency: f64,
    /// Slip per unit gradient signal per second.
    pub integrator_gain: f64,
    pub slip_min: f64,
    pub slip_max: f64,
    pub hpf_damping: f64,
    pub initial_estimate: f64,
}

impl Default for EscConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.005,
            frequency: TAU,
            // calibrated on the 20-60 m/s cycle maneuver for optima at 4.4% and 6%
            integrator_gain: 16.0,
            slip_min: 0.005,
            slip_max: 0.15,
            hpf_damping: std::f64::consts::FRAC_1_SQRT_2,
            initial_estimate: 0.03,
        }
    }
}

impl EscConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.amplitude > 0.0) {
            return Err(ConfigError::invalid("esc.amplitude", "must be positive"));
        }
        if !(self.frequency > 0.0) {
            return Err(ConfigError::invalid("esc.frequency", "must be positive"));
        }
        if !(self.integrator_gain >= 0.0) {
            return Err(ConfigError::invalid("esc.integrator_gain", "must be non-negative"));
        }
        if !(self.slip_min >= 0.0 && self.slip_min < self.slip_max) {
            return Err(ConfigError::invalid("esc.slip_min", "need 0 <= slip_min < slip_max"));
        }
        if !(self.hpf_damping > 0.0) {
            return Err(ConfigError::invalid("esc.hpf_damping", "must be positive"));
        }
        if !(self.slip_min..=self.slip_max).contains(&self.initial_estimate) {
            return Err(ConfigError::invalid("esc.initial_estimate", "must lie within the slip bounds"));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        TAU / self.frequency
    }
}

/// Second-order high-pass `s^2 / (s^2 + 2 zeta w s + w^2)` discretized with
/// the bilinear transform, direct form I.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighPassFilter {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
    sample_time: f64,
}

impl HighPassFilter {
    pub fn new(cutoff: f64, damping: f64, sample_time: f64) -> Self {
        let k = 2.0 / sample_time;
        let k2 = k * k;
        let w2 = cutoff * cutoff;
        let den = k2 + 2.0 * damping * cutoff * k + w2;
        Self {
            b: [k2 / den, -2.0 * k2 / den, k2 / den],
            a: [(2.0 * w2 - 2.0 * k2) / den, (k2 - 2.0 * damping * cutoff * k + w2) / den],
            x: [0.0; 2],
            y: [0.0; 2],
            sample_time,
        }
    }

    pub fn step(&mut self, input: f64) -> f64 {
        let out = self.b[0] * input + self.b[1] * self.x[0] + self.b[2] * self.x[1]
            - self.a[0] * self.y[0]
            - self.a[1] * self.y[1];
        self.x = [input, self.x[0]];
        self.y = [out, self.y[0]];
        out
    }

    /// Puts the filter in steady state for a constant input `u`.
    pub fn reset_to(&mut self, u: f64) {
        self.x = [u; 2];
        self.y = [0.0; 2];
    }

    /// Gain and phase (rad) of the discrete transfer function at `omega`.
    pub fn frequency_response(&self, omega: f64) -> (f64, f64) {
        let th = omega * self.sample_time;
        // z^-1 = cos th - j sin th
        let (c1, s1) = (th.cos(), -th.sin());
        let (c2, s2) = ((2.0 * th).cos(), -(2.0 * th).sin());
        let num = (self.b[0] + self.b[1] * c1 + self.b[2] * c2, self.b[1] * s1 + self.b[2] * s2);
        let den = (1.0 + self.a[0] * c1 + self.a[1] * c2, self.a[0] * s1 + self.a[1] * s2);
        let gain = (num.0.hypot(num.1)) / (den.0.hypot(den.1));
        let phase = num.1.atan2(num.0) - den.1.atan2(den.0);
        (gain, wrap_angle(phase))
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % TAU;
    if a > PI {
        a -= TAU;
    } else if a < -PI {
        a += TAU;
    }
    a
}

/// `kappa_hat + a sin(omega_p t)`.
pub fn perturb(kappa_hat: f64, t: f64, cfg: &EscConfig) -> f64 {
    kappa_hat + cfg.amplitude * (cfg.frequency * t).sin()
}

/// Gradient estimate from the filtered estimated slip and the filtered
/// acceleration.
pub fn demodulate(filtered_slip: f64, filtered_accel: f64) -> f64 {
    filtered_slip * filtered_accel
}

/// Forward-Euler integration clamped to `[min, max]`; the state never winds
/// up past a bound.
pub fn integrate_saturating(kappa_hat: f64, xi: f64, gain: f64, sample_time: f64, bounds: (f64, f64)) -> f64 {
    (kappa_hat + gain * xi * sample_time).clamp(bounds.0, bounds.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LateralScaling {
    /// Lateral acceleration at which the reference reaches zero (m/s^2).
    pub a_zero: f64,
    /// Lateral acceleration from which the reference is reduced (m/s^2).
    pub a_onset: f64,
}

impl Default for LateralScaling {
    fn default() -> Self {
        Self { a_zero: 8.0, a_onset: 2.0 }
    }
}

impl LateralScaling {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.a_onset > 0.0 && self.a_onset < self.a_zero) {
            return Err(ConfigError::invalid("lateral.a_onset", "need 0 < a_onset < a_zero"));
        }
        Ok(())
    }
}

/// Piecewise-affine reduction of the slip reference with lateral acceleration.
pub fn lateral_scale(kappa: f64, a_y: f64, s: &LateralScaling) -> f64 {
    let ay = a_y.abs();
    if ay > s.a_zero {
        0.0
    } else if ay < s.a_onset {
        kappa
    } else {
        kappa * ((s.a_zero - ay) / (s.a_zero - s.a_onset))
    }
}

/// The estimator works on positive slip; braking references are negated.
pub fn sign_for_mode(kappa_ref: f64, mode: SlipMode) -> f64 {
    match mode {
        SlipMode::Driving => kappa_ref,
        SlipMode::Braking => -kappa_ref,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisorConfig {
    /// Time the MPC must be active before the estimator starts (s).
    pub esc_delay: f64,
    /// Lateral acceleration above which the estimator stops (m/s^2).
    pub esc_lateral_limit: f64,
    /// Run the estimator during regenerative braking. Friction brake
    /// application always stops it.
    pub esc_during_braking: bool,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self { esc_delay: 1.0, esc_lateral_limit: 1.0, esc_during_braking: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisorSignals {
    /// Measured slips of both wheels (signed).
    pub kappa_l: f64,
    pub kappa_r: f64,
    /// Signed slip reference currently handed to the controller.
    pub kappa_ref: f64,
    pub driver_torque: f64,
    /// Controller output of the previous step.
    pub controller_torque: f64,
    pub lateral_accel: f64,
    pub brakes_applied: bool,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActivationFlags {
    pub mpc_active: bool,
    pub esc_active: bool,
    /// The controller was switched on this step.
    pub mpc_engaged: bool,
}

/// Activation logic: the slip controller engages when a rear wheel's slip
/// passes the reference and releases when the driver asks for less than it
/// delivers; the estimator runs once the controller has been engaged for a
/// while and the car is neither cornering hard nor friction braking.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervisor {
    pub config: SupervisorConfig,
    mode: Option<SlipMode>,
    mpc_active: bool,
    esc_active: bool,
    mpc_active_since: f64,
}

impl Supervisor {
    pub fn new(config: SupervisorConfig) -> Self {
        Self { config, mode: None, mpc_active: false, esc_active: false, mpc_active_since: 0.0 }
    }

    pub fn mode(&self) -> Option<SlipMode> {
        self.mode
    }

    pub fn step(&mut self, s: &SupervisorSignals) -> ActivationFlags {
        let mode = SlipMode::from_torque(s.driver_torque);
        if self.mode != Some(mode) {
            self.mpc_active = false;
            self.esc_active = false;
        }
        self.mode = Some(mode);
        let sign = mode.sign();

        let mut engaged = false;
        if self.mpc_active {
            if sign * s.driver_torque < sign * s.controller_torque {
                self.mpc_active = false;
            }
        } else {
            let slip = (sign * s.kappa_l).max(sign * s.kappa_r);
            if s.driver_torque != 0.0 && slip > s.kappa_ref.abs() {
                self.mpc_active = true;
                self.mpc_active_since = s.t;
                engaged = true;
            }
        }

        let blocked = s.lateral_accel.abs() > self.config.esc_lateral_limit
            || s.brakes_applied
            || (mode == SlipMode::Braking && !self.config.esc_during_braking);
        // small tolerance so that an integer number of steps reaches the delay
        let held = s.t - self.mpc_active_since >= self.config.esc_delay - 1e-9;
        self.esc_active = self.mpc_active && held && !blocked;

        ActivationFlags { mpc_active: self.mpc_active, esc_active: self.esc_active, mpc_engaged: engaged }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscState {
    pub kappa_hat: f64,
    pub phase: f64,
    pub hpf_accel: HighPassFilter,
    pub hpf_kappa: HighPassFilter,
    /// Last filtered acceleration.
    pub zeta: f64,
    /// Last gradient estimate.
    pub xi: f64,
    pub active: bool,
}

/// Output of one estimator step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EscOutput {
    /// Positive slip reference before lateral scaling and mode sign.
    pub kappa_ref: f64,
    pub kappa_hat: f64,
    pub zeta: f64,
    pub xi: f64,
}

#[derive(Clone, Debug)]
pub struct ExtremumSeeker {
    pub config: EscConfig,
    pub state: EscState,
    sample_time: f64,
}

impl ExtremumSeeker {
    pub fn new(config: EscConfig, sample_time: f64) -> Self {
        let hpf = HighPassFilter::new(config.frequency, config.hpf_damping, sample_time);
        let state = EscState {
            kappa_hat: config.initial_estimate,
            phase: 0.0,
            hpf_accel: hpf.clone(),
            hpf_kappa: hpf,
            zeta: 0.0,
            xi: 0.0,
            active: false,
        };
        Self { config, state, sample_time }
    }

    pub fn kappa_hat(&self) -> f64 {
        self.state.kappa_hat
    }

    /// Restarts the filters in steady state for the current signals, e.g.
    /// when the slip controller engages.
    pub fn reset_filters(&mut self, kappa_tilde: f64, accel: f64) {
        self.state.hpf_kappa.reset_to(kappa_tilde);
        self.state.hpf_accel.reset_to(accel);
        self.state.zeta = 0.0;
        self.state.xi = 0.0;
    }

    /// One estimator step.
    ///
    /// `kappa_tilde` is the positive slip estimated from measured wheel
    /// speeds and `accel` the measured acceleration in the direction being
    /// maximized. The estimate is only integrated while `active`; it is kept
    /// otherwise.
    pub fn step(&mut self, kappa_tilde: f64, accel: f64, active: bool) -> EscOutput {
        let st = &mut self.state;
        let hk = st.hpf_kappa.step(kappa_tilde);
        st.zeta = st.hpf_accel.step(accel);
        if active {
            if !st.active {
                st.phase = 0.0;
            }
            st.xi = demodulate(hk, st.zeta);
            st.kappa_hat = integrate_saturating(
                st.kappa_hat,
                st.xi,
                self.config.integrator_gain,
                self.sample_time,
                (self.config.slip_min, self.config.slip_max),
            );
            st.phase = (st.phase + self.config.frequency * self.sample_time) % TAU;
        } else {
            st.xi = 0.0;
        }
        st.active = active;
        let kappa_ref = if active {
            st.kappa_hat + self.config.amplitude * st.phase.sin()
        } else {
            st.kappa_hat
        };
        EscOutput { kappa_ref, kappa_hat: st.kappa_hat, zeta: st.zeta, xi: st.xi }
    }
}
