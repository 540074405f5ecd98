//! Comparison controllers: a PID slip-velocity tracker and a sliding-mode
//! estimator of the optimal slip.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidConfig {
    /// N m per m/s of slip-velocity error.
    pub kp: f64,
    /// N m per (m/s * s).
    pub ki: f64,
    /// N m per (m/s / s).
    pub kd: f64,
    pub output_min: f64,
    pub output_max: f64,
    /// Bound on the magnitude of the integral contribution (N m).
    pub integral_limit: f64,
}

impl Default for PidConfig {
    /// Aggressive hand tuning: fast on the initial transient, lightly damped
    /// through the loop delays.
    fn default() -> Self {
        Self { kp: 260.0, ki: 2500.0, kd: 0.0, output_min: -250.0, output_max: 250.0, integral_limit: 250.0 }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.kp < 0.0 || self.ki < 0.0 || self.kd < 0.0 {
            return Err(ConfigError::invalid("pid", "gains must be non-negative"));
        }
        if !(self.output_min < self.output_max) {
            return Err(ConfigError::invalid("pid.output_min", "must be below output_max"));
        }
        if !(self.integral_limit >= 0.0) {
            return Err(ConfigError::invalid("pid.integral_limit", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PidState {
    /// Integral contribution, already multiplied by `ki` (N m).
    pub integral: f64,
    pub prev_error: Option<f64>,
}

impl PidState {
    /// Bumpless start: the integral term carries the current output.
    pub fn preload(cfg: &PidConfig, output: f64) -> Self {
        Self { integral: output.clamp(-cfg.integral_limit, cfg.integral_limit), prev_error: None }
    }
}

/// Parallel PID with a clamped integrator and saturated output.
pub fn pid_step(cfg: &PidConfig, state: &mut PidState, error: f64, sample_time: f64) -> f64 {
    state.integral = (state.integral + cfg.ki * error * sample_time).clamp(-cfg.integral_limit, cfg.integral_limit);
    let derivative = state.prev_error.map(|p| (error - p) / sample_time).unwrap_or(0.0);
    state.prev_error = Some(error);
    (cfg.kp * error + state.integral + cfg.kd * derivative).clamp(cfg.output_min, cfg.output_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingModeEstimatorConfig {
    /// Switching gain (slip per second).
    pub switching_gain: f64,
    /// Dead band of the acceleration-gradient signal (m/s^2).
    pub boundary_layer: f64,
    /// History used for the gradient sign (s).
    pub window: f64,
    pub slip_min: f64,
    pub slip_max: f64,
    pub initial_estimate: f64,
}

impl Default for SlidingModeEstimatorConfig {
    fn default() -> Self {
        Self {
            switching_gain: 0.04,
            boundary_layer: 0.05,
            window: 0.2,
            slip_min: 0.005,
            slip_max: 0.15,
            initial_estimate: 0.03,
        }
    }
}

impl SlidingModeEstimatorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.switching_gain > 0.0) {
            return Err(ConfigError::invalid("sliding.switching_gain", "must be positive"));
        }
        if !(self.boundary_layer >= 0.0 && self.window > 0.0) {
            return Err(ConfigError::invalid("sliding.window", "window must be positive, boundary layer non-negative"));
        }
        if !(self.slip_min < self.slip_max) {
            return Err(ConfigError::invalid("sliding.slip_min", "must be below slip_max"));
        }
        Ok(())
    }
}

/// `kappa_hat + rho * sign * T_s`, clamped to the slip bounds.
pub fn sliding_mode_ref_step(cfg: &SlidingModeEstimatorConfig, kappa_hat: f64, gradient_sign: i8, sample_time: f64) -> f64 {
    let s = f64::from(gradient_sign.clamp(-1, 1));
    (kappa_hat + cfg.switching_gain * s * sample_time).clamp(cfg.slip_min, cfg.slip_max)
}

/// Sign of the acceleration-versus-slip slope over a sliding window: the sum
/// of acceleration increments weighted by the sign of the matching slip
/// increments, with a dead band.
#[derive(Clone, Debug)]
pub struct GradientSignDetector {
    capacity: usize,
    boundary_layer: f64,
    history: VecDeque<f64>,
    sum: f64,
    last: Option<(f64, f64)>,
}

impl GradientSignDetector {
    pub fn new(window: f64, boundary_layer: f64, sample_time: f64) -> Self {
        let capacity = ((window / sample_time).round() as usize).max(1);
        Self { capacity, boundary_layer, history: VecDeque::with_capacity(capacity), sum: 0.0, last: None }
    }

    pub fn reset(&mut self) {
        self.history.clear();
        self.sum = 0.0;
        self.last = None;
    }

    /// Feeds one (slip, acceleration) sample and returns the gradient sign.
    pub fn push(&mut self, kappa: f64, accel: f64) -> i8 {
        if let Some((k0, a0)) = self.last {
            let dk = kappa - k0;
            let term = if dk == 0.0 { 0.0 } else { (accel - a0) * dk.signum() };
            self.history.push_back(term);
            self.sum += term;
            if self.history.len() > self.capacity {
                self.sum -= self.history.pop_front().unwrap_or(0.0);
            }
        }
        self.last = Some((kappa, accel));
        if self.sum > self.boundary_layer {
            1
        } else if self.sum < -self.boundary_layer {
            -1
        } else {
            0
        }
    }
}

#[derive(Clone, Debug)]
pub struct SlidingModeEstimator {
    pub config: SlidingModeEstimatorConfig,
    pub kappa_hat: f64,
    detector: GradientSignDetector,
    sample_time: f64,
}

impl SlidingModeEstimator {
    pub fn new(config: SlidingModeEstimatorConfig, sample_time: f64) -> Self {
        let detector = GradientSignDetector::new(config.window, config.boundary_layer, sample_time);
        Self { kappa_hat: config.initial_estimate, config, detector, sample_time }
    }

    pub fn reset_history(&mut self) {
        self.detector.reset();
    }

    pub fn step(&mut self, kappa_tilde: f64, accel: f64, active: bool) -> f64 {
        let sign = self.detector.push(kappa_tilde, accel);
        if active {
            self.kappa_hat = sliding_mode_ref_step(&self.config, self.kappa_hat, sign, self.sample_time);
        }
        self.kappa_hat
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TS: f64 = 0.005;

    #[test]
    fn pid_zero_error() {
        let cfg = PidConfig::default();
        let mut st = PidState::default();
        assert_eq!(pid_step(&cfg, &mut st, 0.0, TS), 0.0);
    }

    #[test]
    fn pid_pure_proportional() {
        let cfg = PidConfig { kp: 12.0, ki: 0.0, kd: 0.0, ..PidConfig::default() };
        let mut st = PidState::default();
        assert_eq!(pid_step(&cfg, &mut st, 1.5, TS), 18.0);
        assert_eq!(pid_step(&cfg, &mut st, -0.5, TS), -6.0);
    }

    #[test]
    fn pid_integrator_ramps_to_clamp() {
        let cfg = PidConfig { kp: 0.0, ki: 100.0, kd: 0.0, integral_limit: 20.0, ..PidConfig::default() };
        let mut st = PidState::default();
        let mut prev = 0.0;
        for k in 1..=100 {
            let u = pid_step(&cfg, &mut st, 1.0, TS);
            let expected = (100.0 * TS * k as f64).min(20.0);
            assert!((u - expected).abs() < 1e-9);
            assert!(u >= prev);
            prev = u;
        }
        assert_eq!(prev, 20.0);
    }

    #[test]
    fn sliding_mode_examples() {
        let cfg = SlidingModeEstimatorConfig::default();
        assert_eq!(sliding_mode_ref_step(&cfg, 0.04, 0, TS), 0.04);
        let mut k = 0.04;
        for i in 1..=10 {
            k = sliding_mode_ref_step(&cfg, k, 1, TS);
            assert!((k - (0.04 + i as f64 * cfg.switching_gain * TS)).abs() < 1e-12);
        }
        for _ in 0..100_000 {
            k = sliding_mode_ref_step(&cfg, k, 1, TS);
        }
        assert_eq!(k, cfg.slip_max);
    }

    #[test]
    fn detector_reads_slope_sign() {
        let mut up = GradientSignDetector::new(0.2, 0.0, TS);
        let mut down = GradientSignDetector::new(0.2, 0.0, TS);
        let (mut s_up, mut s_down) = (0, 0);
        for k in 0..100 {
            let kappa = 0.03 + 0.01 * (k as f64 * 0.1).sin();
            s_up = up.push(kappa, 3.0 * kappa);
            s_down = down.push(kappa, -3.0 * kappa);
        }
        assert_eq!((s_up, s_down), (1, -1));
    }

    proptest! {
        #[test]
        fn pid_output_saturates(errors in proptest::collection::vec(-50.0f64..50.0, 1..200)) {
            let cfg = PidConfig { kd: 3.0, ..PidConfig::default() };
            let mut st = PidState::default();
            for e in errors {
                let u = pid_step(&cfg, &mut st, e, TS);
                prop_assert!(u >= cfg.output_min && u <= cfg.output_max);
            }
        }

        #[test]
        fn sliding_estimate_bounded_with_limited_rate(samples in proptest::collection::vec((0.0f64..0.2, -10.0f64..10.0), 1..300)) {
            let cfg = SlidingModeEstimatorConfig::default();
            let mut est = SlidingModeEstimator::new(cfg.clone(), TS);
            let mut prev = est.kappa_hat;
            for (k, a) in samples {
                let next = est.step(k, a, true);
                prop_assert!(next >= cfg.slip_min && next <= cfg.slip_max);
                prop_assert!((next - prev).abs() <= cfg.switching_gain * TS + 1e-15);
                prev = next;
            }
        }
    }
}
