//! Scalar summaries of a scenario trace.

use serde::{Deserialize, Serialize};

use crate::flags::StatusFlags;
use crate::trace::{Trace, TraceRow};

/// Band around the optimum that counts as converged (slip).
pub const CONVERGENCE_BAND: f64 = 0.0025;
/// Band around the reference used for settling (slip).
pub const SETTLING_BAND: f64 = 0.005;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// RMS slip-velocity tracking error while the controller is active (m/s).
    pub tracking_rms: f64,
    /// Peak slip beyond the reference, in slip percentage points.
    pub overshoot: f64,
    /// Time from first activation until the slip stays within the settling band (s).
    pub settling_time: Option<f64>,
    /// Time after which the estimate stays within the convergence band of the optimum (s).
    pub convergence_time: Option<f64>,
    /// RMS of the operating slip around the optimum while the estimator runs.
    pub dispersion: f64,
    pub braking_distance: f64,
    /// Fraction of steps with the controller active.
    pub active_fraction: f64,
}

/// Per-wheel slip magnitude in the direction of the current mode.
fn wheel_slips(r: &TraceRow) -> [f64; 2] {
    let s = r.mode_sign();
    [s * r.kappa_l, s * r.kappa_r]
}

/// Measured slip velocity averaged over both wheels (m/s).
pub fn slip_velocity(r: &TraceRow, wheel_radius: f64) -> f64 {
    0.5 * (r.omega_l + r.omega_r) * wheel_radius - r.v_x
}

pub fn tracking_error(r: &TraceRow, wheel_radius: f64) -> f64 {
    r.v_slip_ref - slip_velocity(r, wheel_radius)
}

pub fn tracking_rms(trace: &Trace) -> f64 {
    let (sum, n) = trace
        .rows
        .iter()
        .filter(|r| r.mpc_active())
        .fold((0.0, 0usize), |(s, n), r| (s + tracking_error(r, trace.wheel_radius).powi(2), n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Peak slip beyond the reference over active rows with `t0 <= t < t1`, in
/// percentage points. Never negative.
pub fn overshoot_between(trace: &Trace, t0: f64, t1: f64) -> f64 {
    trace
        .rows
        .iter()
        .filter(|r| r.mpc_active() && r.t >= t0 && r.t < t1)
        .flat_map(|r| wheel_slips(r).map(|k| k - r.kappa_ref.abs()))
        .fold(0.0, f64::max)
        * 100.0
}

pub fn overshoot(trace: &Trace) -> f64 {
    overshoot_between(trace, f64::NEG_INFINITY, f64::INFINITY)
}

pub fn first_activation(trace: &Trace) -> Option<f64> {
    trace.rows.iter().find(|r| r.mpc_active()).map(|r| r.t)
}

/// Time from first activation to the last exit of both wheels from the
/// settling band, considering only active rows.
pub fn settling_time(trace: &Trace) -> Option<f64> {
    let start = first_activation(trace)?;
    let mut settled_at = Some(start);
    for r in trace.rows.iter().filter(|r| r.mpc_active()) {
        let outside = wheel_slips(r).iter().any(|k| (k - r.kappa_ref.abs()).abs() > SETTLING_BAND);
        if outside {
            settled_at = None;
        } else if settled_at.is_none() {
            settled_at = Some(r.t);
        }
    }
    settled_at.map(|t| t - start)
}

/// First time after which `|kappa_hat - kappa_star|` stays below the band.
pub fn convergence_time(trace: &Trace, kappa_star: f64) -> Option<f64> {
    let mut since = None;
    for r in &trace.rows {
        if (r.kappa_hat - kappa_star).abs() < CONVERGENCE_BAND {
            since.get_or_insert(r.t);
        } else {
            since = None;
        }
    }
    since
}

/// RMS of the mean operating slip around `kappa_star` over rows where the
/// estimator is running.
pub fn dispersion(trace: &Trace, kappa_star: f64) -> f64 {
    let (sum, n) = trace
        .rows
        .iter()
        .filter(|r| r.status().contains(StatusFlags::ESC_ACTIVE))
        .fold((0.0, 0usize), |(s, n), r| {
            let [l, rr] = wheel_slips(r);
            (s + (0.5 * (l + rr) - kappa_star).powi(2), n + 1)
        });
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Distance covered while the driver brakes (m).
pub fn braking_distance(trace: &Trace) -> f64 {
    trace
        .rows
        .iter()
        .filter(|r| r.driver_torque < 0.0 || r.t_b > 0.0)
        .map(|r| r.v_x * trace.sample_time)
        .sum()
}

/// Sign changes of the tracking error over active rows in `[t0, t1)`.
pub fn zero_crossings(trace: &Trace, t0: f64, t1: f64) -> usize {
    let mut last = 0.0;
    let mut count = 0;
    for r in trace.rows.iter().filter(|r| r.mpc_active() && r.t >= t0 && r.t < t1) {
        let e = tracking_error(r, trace.wheel_radius);
        if e != 0.0 {
            if last != 0.0 && e.signum() != f64::signum(last) {
                count += 1;
            }
            last = e;
        }
    }
    count
}

pub fn compute_metrics(trace: &Trace) -> Metrics {
    let active = trace.rows.iter().filter(|r| r.mpc_active()).count();
    Metrics {
        tracking_rms: tracking_rms(trace),
        overshoot: overshoot(trace),
        settling_time: settling_time(trace),
        convergence_time: trace.kappa_star.and_then(|k| convergence_time(trace, k)),
        dispersion: trace.kappa_star.map(|k| dispersion(trace, k)).unwrap_or(0.0),
        braking_distance: braking_distance(trace),
        active_fraction: if trace.rows.is_empty() { 0.0 } else { active as f64 / trace.rows.len() as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const R: f64 = 0.25;

    fn active_row(t: f64, kappa: f64, kappa_ref: f64) -> TraceRow {
        let v_x = 20.0;
        let omega = v_x * (1.0 + kappa) / R;
        TraceRow {
            t,
            omega_l: omega,
            omega_r: omega,
            v_x,
            kappa_l: kappa,
            kappa_r: kappa,
            kappa_ref,
            v_slip_ref: kappa_ref * v_x,
            flags: (StatusFlags::MPC_ACTIVE | StatusFlags::ESC_ACTIVE).bits(),
            ..Default::default()
        }
    }

    fn trace(rows: Vec<TraceRow>) -> Trace {
        Trace { maneuver: "synthetic".into(), sample_time: 0.01, wheel_radius: R, kappa_star: Some(0.05), rows }
    }

    #[test]
    fn perfect_tracking() {
        let t = trace((0..100).map(|i| active_row(i as f64 * 0.01, 0.05, 0.05)).collect());
        let m = compute_metrics(&t);
        assert!(m.tracking_rms < 1e-12);
        assert_eq!(m.overshoot, 0.0);
        assert_eq!(m.settling_time, Some(0.0));
        assert!(m.dispersion < 1e-12);
        assert_eq!(m.active_fraction, 1.0);
    }

    #[test]
    fn overshoot_in_slip_points() {
        let rows = (0..100)
            .map(|i| {
                let k = if i == 40 { 0.05 + 0.022 } else { 0.05 };
                active_row(i as f64 * 0.01, k, 0.05)
            })
            .collect();
        assert!((overshoot(&trace(rows)) - 2.2).abs() < 1e-9);
    }

    #[test]
    fn overshoot_respects_braking_sign() {
        let mut r = active_row(0.0, -0.07, -0.05);
        r.flags |= StatusFlags::BRAKING.bits();
        assert!((overshoot(&trace(vec![r])) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn convergence_time_definition() {
        let rows = (0..600)
            .map(|i| {
                let t = i as f64 * 0.1;
                let mut r = active_row(t, 0.05, 0.05);
                r.kappa_hat = if t < 37.0 { 0.03 } else { 0.051 };
                if (20.0..20.5).contains(&t) {
                    r.kappa_hat = 0.05;
                }
                r
            })
            .collect();
        let c = convergence_time(&trace(rows), 0.05).unwrap();
        assert!((c - 37.0).abs() < 1e-9);
    }

    #[test]
    fn never_converged() {
        let rows = (0..10).map(|i| active_row(i as f64, 0.05, 0.05)).collect();
        assert_eq!(convergence_time(&trace(rows), 0.5), None);
    }

    #[test]
    fn zero_crossings_counted() {
        let rows = (0..10).map(|i| active_row(i as f64 * 0.01, 0.05 + if i % 2 == 0 { 0.01 } else { -0.01 }, 0.05)).collect();
        assert_eq!(zero_crossings(&trace(rows), 0.0, 1.0), 9);
    }

    #[test]
    fn metrics_non_negative() {
        let rows = (0..50).map(|i| active_row(i as f64 * 0.01, 0.02 + 0.001 * i as f64, 0.05)).collect();
        let m = compute_metrics(&trace(rows));
        assert!(m.tracking_rms >= 0.0 && m.overshoot >= 0.0 && m.dispersion >= 0.0 && m.braking_distance >= 0.0);
    }
}
