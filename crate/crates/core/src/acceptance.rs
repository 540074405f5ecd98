//! The acceptance suite: one check per criterion, each with its measured
//! value, threshold and runtime budget.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SimConfig;
use crate::esc::{demodulate, lateral_scale, ExtremumSeeker, HighPassFilter, LateralScaling};
use crate::metrics::{convergence_time, dispersion, first_activation, overshoot_between, zero_crossings, CONVERGENCE_BAND};
use crate::mpc::{
    augment_delta_u, build_cost, build_plant_model, build_prediction, compute_gains, AugState, CostConfig, MpcController, MpcGains,
    QuadraticForm, TorqueLimits,
};
use crate::oracle::{lateral_scale_reference, qp_minimizer};
use crate::plant::{Measurement, VehicleParams};
use crate::scenario::{fixture, run_scenario_with_gains, ControllerKind, EstimatorKind};
use crate::tire::optimal_slip;
use crate::trace::Trace;
use crate::tuner::{Outcome, PreferenceRecord, SearchSpace, TunerConfig, TuningSession};

#[derive(Clone, Debug)]
pub struct CriterionResult {
    pub name: &'static str,
    pub measured: String,
    pub threshold: String,
    pub passed: bool,
    pub elapsed: Duration,
    pub budget: Option<Duration>,
}

impl CriterionResult {
    fn new(name: &'static str, measured: String, threshold: String, passed: bool, started: Instant, budget: Option<f64>) -> Self {
        let elapsed = started.elapsed();
        let budget = budget.map(Duration::from_secs_f64);
        let in_time = budget.is_none_or(|b| elapsed < b);
        Self { name, measured, threshold, passed: passed && in_time, elapsed, budget }
    }

    /// One report line.
    pub fn line(&self) -> String {
        let budget = self.budget.map(|b| format!(" (budget {:.0} s)", b.as_secs_f64())).unwrap_or_default();
        format!(
            "{} {:<34} measured {:<44} threshold {:<30} {:.2} s{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold,
            self.elapsed.as_secs_f64(),
            budget
        )
    }
}

/// Deliberate faults for checking that the suite can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negates the feedback gains before they are compared with the oracle.
    GainSignFlip,
}

fn apply_fault(g: &mut MpcGains, fault: Fault) {
    if fault == Fault::GainSignFlip {
        for k in g.k_x.iter_mut() {
            *k = -*k;
        }
    }
}

fn random_psd(rng: &mut ChaCha8Rng, scale: f64) -> Matrix2<f64> {
    let l = Matrix2::new(rng.random_range(0.1..1.0), 0.0, rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
    l * l.transpose() * scale
}

/// Analytical optimum (full sequence and gain form of its first element)
/// against the simulated-cost minimizer on random weights and horizons.
pub fn qp_oracle(instances: usize, seed: u64, fault: Fault) -> CriterionResult {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let params = VehicleParams {
            mass: rng.random_range(150.0..450.0),
            wheel_inertia: rng.random_range(0.5..2.0),
            gear_ratio: rng.random_range(2.0..6.0),
            ..VehicleParams::default()
        };
        let am = augment_delta_u(&build_plant_model(&params));
        let n = rng.random_range(1..=10);
        let (sp, sq) = (10f64.powf(rng.random_range(0.0..3.0)), 10f64.powf(rng.random_range(0.0..3.0)));
        let cost = CostConfig {
            p: random_psd(&mut rng, sp),
            q: random_psd(&mut rng, sq),
            r: 10f64.powf(rng.random_range(-1.0..1.0)),
            horizon: n,
        };
        let x = AugState::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let reference: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();

        let pred = build_prediction(&am, n).expect("horizon >= 1");
        let (omega, psi) = build_cost(&cost).expect("valid cost");
        let form = QuadraticForm::new(&pred, &omega, &psi).expect("dimensions");
        let r = nalgebra::DVector::from_column_slice(&reference);
        let analytic = form.optimal_sequence(&x, &r).expect("positive definite");
        let mut gains = compute_gains(&pred.phi, &pred.gamma, &omega, &psi).expect("gains");
        apply_fault(&mut gains, fault);

        let oracle = qp_minimizer(&am, &cost.p, &cost.q, cost.r, &x, &reference, n);
        let scale = oracle.norm().max(1e-300);
        worst = worst.max((&analytic - &oracle).norm() / scale);
        worst = worst.max((gains.delta_u(&x, &reference) - oracle[0]).abs() / scale);
    }
    CriterionResult::new(
        "QP-oracle equivalence",
        format!("max rel err {worst:.2e} over {instances} instances"),
        "<= 1e-6, < 5 s".into(),
        worst <= 1e-6,
        started,
        Some(5.0),
    )
}

/// Stacked prediction against step-by-step simulation.
pub fn prediction_equivalence(seed: u64) -> CriterionResult {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let am = augment_delta_u(&build_plant_model(&VehicleParams::default()));
    let mut worst: f64 = 0.0;
    for n in [1usize, 3, 7] {
        for _ in 0..10 {
            let pred = build_prediction(&am, n).expect("horizon >= 1");
            let x0 = AugState::from_fn(|_, _| rng.random_range(-10.0..10.0));
            let du: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let stacked = &pred.phi * nalgebra::DVector::from_column_slice(x0.as_slice())
                + &pred.gamma * nalgebra::DVector::from_column_slice(&du);
            let mut x = x0;
            for (k, d) in du.iter().enumerate() {
                x = am.a * x + am.b * *d;
                let y = am.c * x;
                worst = worst.max((y[0] - stacked[2 * k]).abs()).max((y[1] - stacked[2 * k + 1]).abs());
            }
        }
    }
    CriterionResult::new(
        "Prediction-model equivalence",
        format!("max abs err {worst:.2e} (N = 1, 3, 7)"),
        "<= 1e-10, < 1 s".into(),
        worst <= 1e-10,
        started,
        Some(1.0),
    )
}

/// Reference controller on the linear model with a constant tire-force
/// disturbance; returns the largest error between 2 s and 3 s.
pub fn integral_action_error(cfg: &SimConfig, gains: Arc<MpcGains>) -> f64 {
    let params = &cfg.vehicle;
    let pm = build_plant_model(params);
    let limits = TorqueLimits { min: -1e6, max: 1e6 };
    let mut ctrl = MpcController::new(gains, params, limits);
    let v0 = 20.0;
    let mut xp = Vector3::new(v0 / params.wheel_radius, v0 / params.wheel_radius, v0);
    let d = Vector3::new(600.0, 600.0, 0.0);
    let reference = Vector2::new(0.8, 0.8);
    let steps = (3.0 / params.sample_time).round() as usize;
    let settle = (2.0 / params.sample_time).round() as usize;
    let mut worst: f64 = 0.0;
    for k in 0..steps {
        let m = Measurement { omega_l: xp[0], omega_r: xp[1], v_x: xp[2], a_x: 0.0 };
        let y = pm.output(&xp);
        if k >= settle {
            worst = worst.max((reference - y).abs().max());
        }
        let u = ctrl.step(&m, reference);
        xp = pm.step(&xp, u, &d);
    }
    worst
}

pub fn integral_action(cfg: &SimConfig) -> CriterionResult {
    let started = Instant::now();
    let gains = reference_gains(cfg);
    let worst = integral_action_error(cfg, gains);
    CriterionResult::new(
        "Integral action",
        format!("max |e| {worst:.2e} m/s for t in [2, 3] s"),
        "< 1e-3 m/s".into(),
        worst < 1e-3,
        started,
        None,
    )
}

pub fn mpc_vs_pid(cfg: &SimConfig) -> CriterionResult {
    let started = Instant::now();
    let gains = reference_gains(cfg);
    let m = fixture("fig6-brake-mu-step").expect("built-in fixture");
    let friction_step = 4.0;
    let mpc = run_scenario_with_gains(&m, cfg, Some(gains)).expect("scenario runs");
    let mut pid_m = m.clone();
    pid_m.controller = ControllerKind::Pid;
    let pid = run_scenario_with_gains(&pid_m, cfg, None).expect("scenario runs");
    let mpc_os = overshoot_between(&mpc, 0.0, friction_step);
    let pid_os = overshoot_between(&pid, 0.0, friction_step);
    let t0 = first_activation(&pid).unwrap_or(0.0);
    let crossings = zero_crossings(&pid, t0, t0 + 1.0);
    CriterionResult::new(
        "MPC vs PID (braking, friction step)",
        format!("MPC {mpc_os:.2} pt, PID {pid_os:.2} pt, {crossings} crossings"),
        "MPC <= 0.5, PID >= 1.5, >= 3, < 10 s".into(),
        mpc_os <= 0.5 && pid_os >= 1.5 && crossings >= 3,
        started,
        Some(10.0),
    )
}

/// Start times of the driver phases (sign changes of the driver torque).
pub fn phase_starts(trace: &Trace) -> Vec<f64> {
    let mut starts = Vec::new();
    let mut last = 0.0;
    for r in &trace.rows {
        let s = r.driver_torque.signum();
        if r.driver_torque != 0.0 && s != last {
            starts.push(r.t);
            last = s;
        }
    }
    starts
}

/// Largest estimate error after the first two acceleration and two braking
/// phases, with the force-maximizing slip found by grid search.
pub fn esc_error_after_four_phases(trace: &Trace, kappa_star: f64) -> Option<(f64, f64)> {
    let t_end = *phase_starts(trace).get(4)?;
    let err = trace.rows.iter().filter(|r| r.t >= t_end).map(|r| (r.kappa_hat - kappa_star).abs()).fold(0.0, f64::max);
    Some((t_end, err))
}

fn kappa_star_of(cfg: &SimConfig) -> f64 {
    let tire = cfg.tire.build().expect("valid tire");
    optimal_slip(&tire, cfg.vehicle.static_rear_load_per_wheel).expect("curve has a peak")
}

pub fn esc_convergence(name: &'static str, cfg: &SimConfig) -> CriterionResult {
    let started = Instant::now();
    let gains = reference_gains(cfg);
    let m = fixture("fig7-cycles").expect("built-in fixture");
    let k_star = kappa_star_of(cfg);
    let trace = run_scenario_with_gains(&m, cfg, Some(gains)).expect("scenario runs");
    let conv = convergence_time(&trace, k_star);
    let (measured, passed) = match esc_error_after_four_phases(&trace, k_star) {
        Some((t, err)) => (
            format!(
                "k* {:.2}%, max err {:.3} pt after {t:.1} s, conv {}",
                100.0 * k_star,
                100.0 * err,
                conv.map(|c| format!("{c:.1} s")).unwrap_or_else(|| "never".into())
            ),
            err <= CONVERGENCE_BAND,
        ),
        None => ("fewer than four phases".into(), false),
    };
    CriterionResult::new(name, measured, "<= 0.25 pt, < 30 s".into(), passed, started, Some(30.0))
}

pub fn esc_vs_sliding(cfg: &SimConfig) -> CriterionResult {
    let started = Instant::now();
    let gains = reference_gains(cfg);
    let m = fixture("fig7-cycles").expect("built-in fixture");
    let k_star = kappa_star_of(cfg);
    let esc = run_scenario_with_gains(&m, cfg, Some(gains.clone())).expect("scenario runs");
    let mut sm = m.clone();
    sm.estimator = EstimatorKind::Sliding;
    let sliding = run_scenario_with_gains(&sm, cfg, Some(gains)).expect("scenario runs");
    let (de, ds) = (dispersion(&esc, k_star), dispersion(&sliding, k_star));
    CriterionResult::new(
        "ESC vs sliding-mode dispersion",
        format!("ESC {:.3} pt, sliding {:.3} pt", 100.0 * de, 100.0 * ds),
        "ESC < sliding".into(),
        de < ds,
        started,
        None,
    )
}

/// Step response of the high-pass, the non-negative modulation factor on
/// constructed signals and convergence on a static quadratic map.
pub fn filter_properties(seed: u64) -> CriterionResult {
    let started = Instant::now();
    let cfg = SimConfig::default();
    let ts = cfg.vehicle.sample_time;
    let w = cfg.esc.frequency;

    let mut hpf = HighPassFilter::new(w, cfg.esc.hpf_damping, ts);
    let steps = (40.0 / w / ts).ceil() as usize;
    let mut step_residual: f64 = 0.0;
    for k in 0..steps {
        let y = hpf.step(1.0);
        if k as f64 * ts >= 10.0 / w {
            step_residual = step_residual.max(y.abs());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_p = f64::INFINITY;
    for _ in 0..50 {
        let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let grad = rng.random_range(-50.0..50.0);
        let (k0, a0) = (rng.random_range(0.01..0.1), rng.random_range(-5.0..5.0));
        let mut fk = HighPassFilter::new(w, cfg.esc.hpf_damping, ts);
        let mut fa = fk.clone();
        fk.reset_to(k0);
        fa.reset_to(a0);
        for k in 0..(5.0 / ts) as usize {
            let s = cfg.esc.amplitude * (w * k as f64 * ts + theta).sin();
            let xi = demodulate(fk.step(k0 + s), fa.step(a0 + grad * s));
            // xi = grad * P(t)
            if grad != 0.0 {
                min_p = min_p.min(xi / grad);
            }
        }
    }

    let k_opt = 0.05;
    let curvature = 2500.0;
    let mut esc = ExtremumSeeker::new(cfg.esc.clone(), ts);
    let mut applied = esc.kappa_hat();
    let mut trace = Vec::new();
    for k in 0..(60.0 * cfg.esc.period() / ts) as usize {
        let out = esc.step(applied, -curvature * (applied - k_opt).powi(2), true);
        applied = out.kappa_ref;
        trace.push((k as f64 * ts, out.kappa_hat));
    }
    let mut conv = None;
    for (t, kh) in &trace {
        if (kh - k_opt).abs() < CONVERGENCE_BAND {
            conv.get_or_insert(*t);
        } else {
            conv = None;
        }
    }
    let periods = conv.map(|t| t / cfg.esc.period());
    let ok = step_residual < 1e-3 && min_p >= -1e-15 && periods.is_some_and(|p| p <= 30.0);
    CriterionResult::new(
        "Filter and demodulation properties",
        format!(
            "step {:.1e}, min P {:.1e}, map conv {}",
            step_residual,
            min_p,
            periods.map(|p| format!("{p:.1} periods")).unwrap_or_else(|| "never".into())
        ),
        "< 1e-3, >= 0, <= 30 periods".into(),
        ok,
        started,
        None,
    )
}

pub fn lateral_scaling(seed: u64) -> CriterionResult {
    let started = Instant::now();
    let s = LateralScaling::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut samples: Vec<(f64, f64)> = (0..1000).map(|_| (rng.random_range(-12.0..12.0), rng.random_range(0.0..0.15))).collect();
    for b in [s.a_onset, s.a_zero, -s.a_onset, -s.a_zero] {
        samples.push((b, 0.044));
    }
    for (ay, k) in &samples {
        if lateral_scale(*k, *ay, &s) != lateral_scale_reference(*k, *ay, s.a_zero, s.a_onset) {
            mismatches += 1;
        }
    }
    CriterionResult::new(
        "Lateral scaling",
        format!("{mismatches} mismatches in {} samples", samples.len()),
        "0 (exact)".into(),
        mismatches == 0,
        started,
        None,
    )
}

/// Concave score over the unit-box coordinates of the default space, with
/// its maximum (1.0) at `optimum`.
pub fn synthetic_score(space: &SearchSpace, optimum: &[f64], x: &[f64]) -> f64 {
    let z = space.normalize(x);
    let zs = space.normalize(optimum);
    1.0 - z.iter().zip(&zs).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

/// Runs `pairs` scripted judgments and returns the best-so-far score.
pub fn tuner_oracle_score(pairs: usize, seed: u64, optimum: &[f64]) -> f64 {
    let space = SearchSpace::default();
    let mut s = TuningSession::new(space.clone(), TunerConfig { seed, ..TunerConfig::default() }).expect("valid space");
    for _ in 0..pairs {
        let Some((a, b)) = s.pending_pair() else { break };
        let (fa, fb) = (synthetic_score(&space, optimum, &s.points[a].0), synthetic_score(&space, optimum, &s.points[b].0));
        let outcome = if fa > fb {
            Outcome::APreferred
        } else if fb > fa {
            Outcome::BPreferred
        } else {
            Outcome::Tie
        };
        s.record_preference(PreferenceRecord { pair: (a, b), outcome, stable_a: true, stable_b: true }).expect("pending pair");
    }
    let best = s.best_so_far().expect("preferences recorded").expect("all points stable");
    synthetic_score(&space, optimum, &best.point.0)
}

pub const TUNER_ORACLE_OPTIMUM: [f64; 3] = [40.0, 900.0, 300.0];

pub fn tuner_oracle() -> CriterionResult {
    let started = Instant::now();
    let space = SearchSpace::default();
    let reported = [250.0, 250.0, 1450.0];
    let contains = space.contains(&reported);
    let score = tuner_oracle_score(50, 1, &TUNER_ORACLE_OPTIMUM);
    CriterionResult::new(
        "Tuner synthetic-oracle regression",
        format!("best score {score:.4} of 1.0 after 50 pairs; bounds hold (250, 250, 1450): {contains}"),
        ">= 0.9, < 120 s".into(),
        score >= 0.9 && contains,
        started,
        Some(120.0),
    )
}

/// Gains for the configured cost; synthesis time counts against the
/// criterion that needs them.
fn reference_gains(cfg: &SimConfig) -> Arc<MpcGains> {
    Arc::new(crate::mpc::synthesize(&cfg.vehicle, &cfg.mpc.cost()).expect("reference gains"))
}

/// Every criterion, in order.
pub fn run_all(fault: Fault) -> Vec<CriterionResult> {
    let cfg = SimConfig::default();
    let mut moved = cfg.clone();
    moved.tire.optimal_slip = 0.06;
    vec![
        qp_oracle(25, 1, fault),
        prediction_equivalence(2),
        integral_action(&cfg),
        mpc_vs_pid(&cfg),
        esc_convergence("ESC convergence (peak 4.4%)", &cfg),
        esc_vs_sliding(&cfg),
        esc_convergence("ESC robustness (peak moved to 6%)", &moved),
        filter_properties(3),
        lateral_scaling(4),
        tuner_oracle(),
    ]
}
