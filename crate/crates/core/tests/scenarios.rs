use std::sync::Arc;

use slipctl::acceptance::{qp_oracle, Fault};
use slipctl::flags::StatusFlags;
use slipctl::metrics::compute_metrics;
use slipctl::mpc::synthesize;
use slipctl::scenario::{fixture, fixture_ids, run_scenario, run_scenario_with_gains, Maneuver};
use slipctl::trace::{Trace, TRACE_COLUMNS};
use slipctl::config::SimConfig;
use slipctl::SimError;

fn gains(cfg: &SimConfig) -> Arc<slipctl::mpc::MpcGains> {
    Arc::new(synthesize(&cfg.vehicle, &cfg.mpc.cost()).unwrap())
}

#[test]
fn same_seed_gives_identical_traces() {
    let cfg = SimConfig::default();
    let g = gains(&cfg);
    let m = fixture("fig6-brake-mu-step").unwrap();
    let a = run_scenario_with_gains(&m, &cfg, Some(g.clone())).unwrap();
    let b = run_scenario_with_gains(&m, &cfg, Some(g)).unwrap();
    assert_eq!(a.to_csv_string(), b.to_csv_string());
}

#[test]
fn seed_changes_noisy_trace() {
    let cfg = SimConfig::default();
    let g = gains(&cfg);
    let mut m = fixture("fig5-tuning").unwrap();
    m.duration = 2.0;
    let a = run_scenario_with_gains(&m, &cfg, Some(g.clone())).unwrap();
    m.seed += 1;
    let b = run_scenario_with_gains(&m, &cfg, Some(g)).unwrap();
    assert_ne!(a.to_csv_string(), b.to_csv_string());
}

#[test]
fn tuning_maneuver_respects_supervisor_rules() {
    let cfg = SimConfig::default();
    let m = fixture("fig5-tuning").unwrap();
    let trace = run_scenario(&m, &cfg).unwrap();
    assert_eq!(trace.rows.len(), m.steps(cfg.vehicle.sample_time));
    assert!(trace.rows.iter().any(|r| r.mpc_active()));
    assert!(trace.rows.iter().any(|r| r.status().contains(StatusFlags::ESC_ACTIVE)));
    assert!(trace.rows.iter().any(|r| r.status().contains(StatusFlags::LATERAL_SCALED)));

    let mut active_since = None;
    for r in &trace.rows {
        let f = r.status();
        active_since = if f.contains(StatusFlags::MPC_ACTIVE) { active_since.or(Some(r.t)) } else { None };
        if f.contains(StatusFlags::ESC_ACTIVE) {
            let since = active_since.expect("estimator runs only under the controller");
            assert!(r.t - since >= cfg.supervisor.esc_delay - 1e-9, "estimator started early at t = {}", r.t);
            assert_eq!(r.t_b, 0.0, "estimator ran with friction brake at t = {}", r.t);
            assert!(r.a_y.abs() <= cfg.supervisor.esc_lateral_limit + 0.3, "estimator ran at a_y = {}", r.a_y);
            assert!(r.kappa_hat >= cfg.esc.slip_min - 1e-12 && r.kappa_hat <= cfg.esc.slip_max + 1e-12);
        }
        assert!(r.t_m.abs() <= cfg.mpc.torque_max + 1e-9);
    }
}

#[test]
fn coasting_never_engages() {
    let trace = run_scenario(&fixture("coast").unwrap(), &SimConfig::default()).unwrap();
    assert!(trace.rows.iter().all(|r| r.flags & StatusFlags::MPC_ACTIVE.bits() == 0));
    assert!(trace.rows.last().unwrap().v_x < 30.0);
}

#[test]
fn csv_round_trip_is_exact() {
    let mut m = fixture("fig7-cycles").unwrap();
    m.duration = 3.0;
    let trace = run_scenario(&m, &SimConfig::default()).unwrap();
    let text = trace.to_csv_string();
    assert_eq!(text.lines().next().unwrap(), TRACE_COLUMNS.join(","));
    let back = Trace::read_csv(text.as_bytes()).unwrap();
    assert_eq!(back.rows, trace.rows);
    assert!((back.sample_time - trace.sample_time).abs() < 1e-12);
}

#[test]
fn metrics_are_finite_for_every_fixture() {
    let cfg = SimConfig::default();
    let g = gains(&cfg);
    for id in fixture_ids() {
        let mut m = fixture(id).unwrap();
        m.duration = m.duration.min(8.0);
        let trace = run_scenario_with_gains(&m, &cfg, Some(g.clone())).unwrap();
        let x = compute_metrics(&trace);
        assert!(x.tracking_rms.is_finite() && x.overshoot >= 0.0, "{id}: {x:?}");
        assert!((0.0..=1.0).contains(&x.active_fraction));
    }
}

#[test]
fn mpc_without_gains_is_rejected() {
    let m = fixture("fig6-brake-mu-step").unwrap();
    assert!(matches!(run_scenario_with_gains(&m, &SimConfig::default(), None), Err(SimError::Config(_))));
}

#[test]
fn invalid_maneuver_rejected() {
    let mut m = fixture("coast").unwrap();
    m.duration = -1.0;
    assert!(run_scenario(&m, &SimConfig::default()).is_err());
    let text = m.to_toml().replace("duration = -1.0", "duration = 1.0\nbogus = 3");
    assert!(Maneuver::parse(&text).is_err());
}

#[test]
fn injected_gain_fault_fails_the_oracle() {
    assert!(qp_oracle(10, 3, Fault::None).passed);
    let faulty = qp_oracle(10, 3, Fault::GainSignFlip);
    assert!(!faulty.passed, "{}", faulty.line());
}
