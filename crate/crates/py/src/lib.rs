//! Python module `slipctl`: scenarios, gain synthesis, the preference tuner
//! and the acceptance suite.

use std::sync::Arc;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::slipctl::acceptance::{run_all, Fault};
use ::slipctl::config::SimConfig;
use ::slipctl::metrics::compute_metrics;
use ::slipctl::mpc::{synthesize, MpcGains};
use ::slipctl::scenario::{fixture, fixture_ids, run_scenario_with_gains, ControllerKind, EstimatorKind, Maneuver};
use ::slipctl::trace::{Trace, TRACE_COLUMNS};
use ::slipctl::tuner::{Outcome, PreferenceRecord, SearchSpace, TunerConfig, TuningSession};

/// `(p, q, N)`.
type Params = (f64, f64, usize);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Simulation parameters. Unset keys take their defaults.
#[pyclass(name = "SimConfig", module = "slipctl", from_py_object)]
#[derive(Clone, Default)]
struct PySimConfig {
    inner: SimConfig,
}

#[pymethods]
impl PySimConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => SimConfig::parse(t).map_err(value_err)?,
            None => SimConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn p(&self) -> f64 {
        self.inner.mpc.p
    }
    #[setter]
    fn set_p(&mut self, v: f64) {
        self.inner.mpc.p = v;
    }
    #[getter]
    fn q(&self) -> f64 {
        self.inner.mpc.q
    }
    #[setter]
    fn set_q(&mut self, v: f64) {
        self.inner.mpc.q = v;
    }
    #[getter]
    fn r(&self) -> f64 {
        self.inner.mpc.r
    }
    #[setter]
    fn set_r(&mut self, v: f64) {
        self.inner.mpc.r = v;
    }
    #[getter]
    fn horizon(&self) -> usize {
        self.inner.mpc.horizon
    }
    #[setter]
    fn set_horizon(&mut self, v: usize) {
        self.inner.mpc.horizon = v;
    }
    /// Force-maximizing slip the tire is calibrated to.
    #[getter]
    fn optimal_slip(&self) -> f64 {
        self.inner.tire.optimal_slip
    }
    #[setter]
    fn set_optimal_slip(&mut self, v: f64) {
        self.inner.tire.optimal_slip = v;
    }
    #[getter]
    fn sample_time(&self) -> f64 {
        self.inner.vehicle.sample_time
    }
}

#[pyclass(name = "Gains", module = "slipctl", frozen)]
struct PyGains {
    inner: Arc<MpcGains>,
}

#[pymethods]
impl PyGains {
    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }
    #[getter]
    fn k_x(&self) -> Vec<f64> {
        self.inner.k_x.to_vec()
    }
    #[getter]
    fn k_r(&self) -> Vec<f64> {
        self.inner.k_r.clone()
    }
    #[getter]
    fn condition_bound(&self) -> f64 {
        self.inner.condition_bound
    }
}

/// Synthesizes the MPC gains for a config.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn synthesize_gains(py: Python<'_>, config: Option<PySimConfig>) -> PyResult<PyGains> {
    let cfg = config.unwrap_or_default().inner;
    let g = py.detach(|| synthesize(&cfg.vehicle, &cfg.mpc.cost())).map_err(value_err)?;
    Ok(PyGains { inner: Arc::new(g) })
}

#[pyclass(name = "Maneuver", module = "slipctl", from_py_object)]
#[derive(Clone)]
struct PyManeuver {
    inner: Maneuver,
}

#[pymethods]
impl PyManeuver {
    /// Parses a maneuver from TOML text.
    #[new]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self { inner: Maneuver::parse(toml).map_err(value_err)? })
    }

    /// A built-in fixture by id.
    #[staticmethod]
    fn fixture(id: &str) -> PyResult<Self> {
        Ok(Self { inner: fixture(id).map_err(|e| PyKeyError::new_err(e.to_string()))? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }
    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration
    }
    #[setter]
    fn set_duration(&mut self, v: f64) {
        self.inner.duration = v;
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }
    /// `"mpc"` or `"pid"`.
    #[getter]
    fn controller(&self) -> &'static str {
        match self.inner.controller {
            ControllerKind::Mpc => "mpc",
            ControllerKind::Pid => "pid",
        }
    }
    #[setter]
    fn set_controller(&mut self, v: &str) -> PyResult<()> {
        self.inner.controller = match v {
            "mpc" => ControllerKind::Mpc,
            "pid" => ControllerKind::Pid,
            _ => return Err(PyValueError::new_err(format!("unknown controller `{v}`; expected mpc or pid"))),
        };
        Ok(())
    }
    /// `"esc"`, `"sliding"` or `"fixed"`.
    #[getter]
    fn estimator(&self) -> &'static str {
        match self.inner.estimator {
            EstimatorKind::Esc => "esc",
            EstimatorKind::Sliding => "sliding",
            EstimatorKind::Fixed => "fixed",
        }
    }
    #[setter]
    fn set_estimator(&mut self, v: &str) -> PyResult<()> {
        self.inner.estimator = match v {
            "esc" => EstimatorKind::Esc,
            "sliding" => EstimatorKind::Sliding,
            "fixed" => EstimatorKind::Fixed,
            _ => return Err(PyValueError::new_err(format!("unknown estimator `{v}`; expected esc, sliding or fixed"))),
        };
        Ok(())
    }
}

#[pyclass(name = "Trace", module = "slipctl", frozen)]
struct PyTrace {
    inner: Trace,
}

#[pymethods]
impl PyTrace {
    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }

    #[staticmethod]
    fn columns() -> Vec<&'static str> {
        TRACE_COLUMNS.to_vec()
    }

    /// One column by name.
    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        let i = TRACE_COLUMNS.iter().position(|c| *c == name).ok_or_else(|| PyKeyError::new_err(name.to_string()))?;
        Ok(self.inner.rows.iter().map(|r| r.values()[i]).collect())
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv_string()
    }

    #[getter]
    fn kappa_star(&self) -> Option<f64> {
        self.inner.kappa_star
    }

    /// Scalar summaries as a dict.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = compute_metrics(&self.inner);
        let d = PyDict::new(py);
        d.set_item("tracking_rms", m.tracking_rms)?;
        d.set_item("overshoot", m.overshoot)?;
        d.set_item("settling_time", m.settling_time)?;
        d.set_item("convergence_time", m.convergence_time)?;
        d.set_item("dispersion", m.dispersion)?;
        d.set_item("braking_distance", m.braking_distance)?;
        d.set_item("active_fraction", m.active_fraction)?;
        Ok(d)
    }
}

/// Runs a maneuver. Gains are synthesized when the MPC is selected and none
/// are given.
#[pyfunction]
#[pyo3(signature = (maneuver, config = None, gains = None))]
fn run_scenario(py: Python<'_>, maneuver: PyManeuver, config: Option<PySimConfig>, gains: Option<Py<PyGains>>) -> PyResult<PyTrace> {
    let cfg = config.unwrap_or_default().inner;
    let m = maneuver.inner;
    let gains = gains.map(|g| g.get().inner.clone());
    let trace = py
        .detach(move || {
            let gains = match (m.controller, gains) {
                (ControllerKind::Mpc, None) => Some(Arc::new(synthesize(&cfg.vehicle, &cfg.mpc.cost())?)),
                (_, g) => g,
            };
            run_scenario_with_gains(&m, &cfg, gains)
        })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyTrace { inner: trace })
}

#[pyfunction(name = "fixture_ids")]
fn py_fixture_ids() -> Vec<&'static str> {
    fixture_ids()
}

/// Preference-based search over `(p, q, N)`.
#[pyclass(name = "TuningSession", module = "slipctl")]
struct PyTuningSession {
    inner: TuningSession,
}

fn outcome(s: &str) -> PyResult<Outcome> {
    match s {
        "a" | "a_preferred" => Ok(Outcome::APreferred),
        "b" | "b_preferred" => Ok(Outcome::BPreferred),
        "tie" => Ok(Outcome::Tie),
        _ => Err(PyValueError::new_err(format!("unknown outcome `{s}`; expected a, b or tie"))),
    }
}

#[pymethods]
impl PyTuningSession {
    /// `bounds` maps `p`, `q` and `horizon` to `(min, max)`.
    #[new]
    #[pyo3(signature = (p = (1.0, 1e4), q = (1.0, 1e4), horizon = (10.0, 2000.0), seed = 0))]
    fn new(p: (f64, f64), q: (f64, f64), horizon: (f64, f64), seed: u64) -> PyResult<Self> {
        let inner = TuningSession::new(SearchSpace::mpc(p, q, horizon), TunerConfig { seed, ..TunerConfig::default() }).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn pending_pair(&self) -> Option<(usize, usize)> {
        self.inner.pending_pair()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    /// Evaluated points as `(p, q, N)`.
    #[getter]
    fn points(&self) -> Vec<Params> {
        self.inner.points.iter().map(|x| (x.p(), x.q(), x.horizon())).collect()
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.inner.records.len()
    }

    /// Records a judgment of the pending pair; returns the next pair.
    #[pyo3(signature = (outcome_, stable_a = true, stable_b = true))]
    fn record(&mut self, outcome_: &str, stable_a: bool, stable_b: bool) -> PyResult<Option<(usize, usize)>> {
        let pair = self.inner.pending_pair().ok_or_else(|| PyRuntimeError::new_err("no pending pair"))?;
        let rec = PreferenceRecord { pair, outcome: outcome(outcome_)?, stable_a, stable_b };
        self.inner.record_preference(rec).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// `(index, (p, q, N))` of the best stable point, or None.
    fn best(&self) -> PyResult<Option<(usize, Params)>> {
        let b = self.inner.best_so_far().map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(b.map(|b| (b.index, (b.point.p(), b.point.q(), b.point.horizon()))))
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: TuningSession::from_json(text).map_err(value_err)? })
    }
}

/// Runs the acceptance suite; one dict per criterion.
#[pyfunction]
#[pyo3(signature = (fault = "none"))]
fn run_acceptance<'py>(py: Python<'py>, fault: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let fault = match fault {
        "none" => Fault::None,
        "gain-sign-flip" => Fault::GainSignFlip,
        _ => return Err(PyValueError::new_err(format!("unknown fault `{fault}`"))),
    };
    let results = py.detach(|| run_all(fault));
    results
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", r.name)?;
            d.set_item("measured", r.measured)?;
            d.set_item("threshold", r.threshold)?;
            d.set_item("passed", r.passed)?;
            d.set_item("elapsed", r.elapsed.as_secs_f64())?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "slipctl")]
fn slipctl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySimConfig>()?;
    m.add_class::<PyGains>()?;
    m.add_class::<PyManeuver>()?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyTuningSession>()?;
    m.add_function(wrap_pyfunction!(synthesize_gains, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(py_fixture_ids, m)?)?;
    m.add_function(wrap_pyfunction!(run_acceptance, m)?)?;
    m.add("TRACE_COLUMNS", TRACE_COLUMNS.to_vec())?;
    Ok(())
}
