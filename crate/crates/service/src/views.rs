//! JSON payloads returned by the API.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use slipctl::metrics::Metrics;
use slipctl::trace::{downsample_minmax, Trace, TraceRow};
use slipctl::tuner::{ParameterPoint, PreferenceRecord, SearchSpace};

use crate::store::{SessionRecord, Status};

/// Version of every JSON payload; clients refuse payloads they do not know.
pub const API_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub p: f64,
    pub q: f64,
    pub horizon: usize,
}

impl From<&ParameterPoint> for Params {
    fn from(x: &ParameterPoint) -> Self {
        Self { p: x.p(), q: x.q(), horizon: x.horizon() }
    }
}

/// Inclusive `[min, max]` per tuned parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub p: [f64; 2],
    pub q: [f64; 2],
    pub horizon: [f64; 2],
}

impl Default for Bounds {
    fn default() -> Self {
        Self::from(&SearchSpace::default())
    }
}

impl From<&SearchSpace> for Bounds {
    fn from(s: &SearchSpace) -> Self {
        let d = |i: usize| [s.dims[i].lo, s.dims[i].hi];
        Self { p: d(0), q: d(1), horizon: d(2) }
    }
}

impl Bounds {
    pub fn space(&self) -> SearchSpace {
        SearchSpace::mpc((self.p[0], self.p[1]), (self.q[0], self.q[1]), (self.horizon[0], self.horizon[1]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointView {
    pub index: usize,
    pub params: Params,
    /// Stability as judged in the last comparison; null until compared.
    pub judged_stable: Option<bool>,
    /// Whether the simulation ran to completion; null until simulated.
    pub simulated: Option<bool>,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub schema_version: u32,
    pub id: String,
    pub maneuver: String,
    pub status: Status,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// Preferences recorded so far.
    pub iteration: usize,
    pub max_pairs: usize,
    pub pending_pair: Option<(usize, usize)>,
    pub bounds: Bounds,
    pub seed: u64,
    pub points: Vec<PointView>,
    pub preferences: Vec<PreferenceRecord>,
}

pub fn point_view(rec: &SessionRecord, index: usize) -> PointView {
    let ev = rec.evaluations.get(&index);
    PointView {
        index,
        params: Params::from(&rec.tuner.points[index]),
        judged_stable: rec.tuner.stable[index],
        simulated: ev.map(|e| e.completed()),
        metrics: ev.and_then(|e| e.metrics.clone()),
        error: ev.and_then(|e| e.error.clone()),
    }
}

pub fn session_view(rec: &SessionRecord) -> SessionView {
    SessionView {
        schema_version: API_SCHEMA_VERSION,
        id: rec.id.clone(),
        maneuver: rec.maneuver.clone(),
        status: rec.status,
        created_at: rec.created_at,
        updated_at: rec.updated_at,
        iteration: rec.tuner.records.len(),
        max_pairs: rec.max_pairs,
        pending_pair: rec.tuner.pending_pair(),
        bounds: Bounds::from(&rec.tuner.space),
        seed: rec.tuner.config.seed,
        points: (0..rec.tuner.points.len()).map(|i| point_view(rec, i)).collect(),
        preferences: rec.tuner.records.clone(),
    }
}

/// One plotted signal after min/max downsampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesView {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

/// Plotted signals by trace column name.
pub const SERIES: [&str; 9] = ["kappa_l", "kappa_r", "kappa_ref", "kappa_hat", "t_m", "driver_torque", "v_x", "mu", "a_y"];

fn series_value(name: &str, r: &TraceRow) -> f64 {
    match name {
        "kappa_l" => r.kappa_l,
        "kappa_r" => r.kappa_r,
        "kappa_ref" => r.kappa_ref,
        "kappa_hat" => r.kappa_hat,
        "t_m" => r.t_m,
        "driver_torque" => r.driver_torque,
        "v_x" => r.v_x,
        "mu" => r.mu,
        "a_y" => r.a_y,
        _ => unreachable!("unknown series {name}"),
    }
}

pub fn series(trace: &Trace, buckets: usize) -> BTreeMap<String, SeriesView> {
    let t = trace.column(|r| r.t);
    SERIES
        .iter()
        .map(|&name| {
            let (ts, ys) = downsample_minmax(&t, &trace.column(|r| series_value(name, r)), buckets);
            (name.to_string(), SeriesView { t: ts, y: ys })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    #[serde(flatten)]
    pub point: PointView,
    /// Full-resolution CSV of this candidate.
    pub trace_url: String,
    /// Downsampled plotting series; null when the simulation failed.
    pub series: Option<BTreeMap<String, SeriesView>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairView {
    pub schema_version: u32,
    pub session_id: String,
    pub status: Status,
    pub iteration: usize,
    pub max_pairs: usize,
    pub sample_time: f64,
    pub a: CandidateView,
    pub b: CandidateView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestView {
    pub schema_version: u32,
    pub session_id: String,
    pub status: Status,
    pub iteration: usize,
    /// Null when no compared point was judged stable.
    pub best: Option<PointView>,
    /// Winners of comparisons that were excluded as unstable.
    pub unstable_excluded: Vec<usize>,
}
