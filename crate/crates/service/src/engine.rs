//! Candidate simulation with small in-memory caches for gains and traces.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use slipctl::config::SimConfig;
use slipctl::metrics::{compute_metrics, Metrics};
use slipctl::mpc::{synthesize, MpcGains};
use slipctl::scenario::{fixture, run_scenario_with_gains, ControllerKind};
use slipctl::trace::Trace;
use slipctl::tuner::ParameterPoint;
use slipctl::SimError;

const GAIN_CACHE: usize = 4;
const TRACE_CACHE: usize = 32;

/// `(p, q)` bit patterns and horizon.
type GainKey = (u64, u64, usize);

pub struct Engine {
    base: SimConfig,
    gains: Mutex<Vec<(GainKey, Arc<MpcGains>)>>,
    traces: Mutex<HashMap<(String, usize), Arc<Trace>>>,
}

impl Engine {
    pub fn new(base: SimConfig) -> Self {
        Self { base, gains: Mutex::new(Vec::new()), traces: Mutex::new(HashMap::new()) }
    }

    pub fn base_config(&self) -> &SimConfig {
        &self.base
    }

    /// Simulation config for one candidate `(p, q, N)`.
    pub fn config_for(&self, point: &ParameterPoint) -> SimConfig {
        let mut cfg = self.base.clone();
        cfg.mpc.p = point.p();
        cfg.mpc.q = point.q();
        cfg.mpc.horizon = point.horizon();
        cfg
    }

    fn gains_for(&self, cfg: &SimConfig) -> Result<Arc<MpcGains>, SimError> {
        let key: GainKey = (cfg.mpc.p.to_bits(), cfg.mpc.q.to_bits(), cfg.mpc.horizon);
        if let Some((_, g)) = self.gains.lock().expect("gain cache").iter().find(|(k, _)| *k == key) {
            return Ok(g.clone());
        }
        let g = Arc::new(synthesize(&cfg.vehicle, &cfg.mpc.cost())?);
        let mut cache = self.gains.lock().expect("gain cache");
        if cache.len() >= GAIN_CACHE {
            cache.remove(0);
        }
        cache.push((key, g.clone()));
        Ok(g)
    }

    /// Runs `maneuver` with the candidate's weights and horizon. The MPC is
    /// always the tracking controller, whatever the fixture selects.
    pub fn simulate(&self, maneuver: &str, point: &ParameterPoint) -> Result<Trace, SimError> {
        let mut m = fixture(maneuver)?;
        m.controller = ControllerKind::Mpc;
        let cfg = self.config_for(point);
        cfg.validate()?;
        let gains = self.gains_for(&cfg)?;
        run_scenario_with_gains(&m, &cfg, Some(gains))
    }

    /// Trace of a point, reproduced if not cached.
    pub fn trace(&self, session: &str, index: usize, maneuver: &str, point: &ParameterPoint) -> Result<Arc<Trace>, SimError> {
        let key = (session.to_string(), index);
        if let Some(t) = self.traces.lock().expect("trace cache").get(&key) {
            return Ok(t.clone());
        }
        let t = Arc::new(self.simulate(maneuver, point)?);
        let mut cache = self.traces.lock().expect("trace cache");
        if cache.len() >= TRACE_CACHE {
            cache.clear();
        }
        cache.insert(key, t.clone());
        Ok(t)
    }

    /// Metrics of a point, or the reason its simulation failed.
    pub fn evaluate(&self, session: &str, index: usize, maneuver: &str, point: &ParameterPoint) -> Result<Metrics, String> {
        self.trace(session, index, maneuver, point).map(|t| compute_metrics(&t)).map_err(|e| e.to_string())
    }
}
