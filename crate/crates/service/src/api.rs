//! Routes, handlers and the per-session state machine.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use slipctl::config::SimConfig;
use slipctl::scenario::fixture;
use slipctl::tuner::{Outcome, PreferenceRecord, TunerConfig, TuningSession};
use slipctl::{ConfigError, TunerError};
use tracing::{info, warn};

use crate::engine::Engine;
use crate::store::{AppliedRequest, Evaluation, SessionRecord, Status, Store, StoreError, SESSION_FILE_VERSION};
use crate::views::{self, BestView, Bounds, CandidateView, PairView, SessionView, API_SCHEMA_VERSION};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
const DEFAULT_MAX_PAIRS: usize = 50;
const DEFAULT_BUCKETS: usize = 400;

#[derive(Clone, Debug, Default)]
pub struct ServiceOptions {
    /// Base simulation config; the tuner overrides `mpc.p`, `mpc.q` and `mpc.horizon`.
    pub base_config: SimConfig,
    /// Stop after persisting a preference, before simulating the next pair.
    /// Used to exercise crash recovery.
    #[doc(hidden)]
    pub halt_before_simulation: bool,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    suggestions: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code, message: message.into(), suggestions: Vec::new() } }
    }
    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
    }
    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }
    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self::internal(e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::validation(e.body_text())
    }
}

impl From<TunerError> for ApiError {
    fn from(e: TunerError) -> Self {
        match e {
            TunerError::DuplicatePreference(..) | TunerError::NotPending(..) | TunerError::Converged | TunerError::NoPreferences => {
                Self::conflict(e.to_string())
            }
            _ => Self::validation(e.to_string()),
        }
    }
}

fn maneuver_error(e: ConfigError) -> ApiError {
    match e {
        ConfigError::UnknownManeuver { name, suggestions } => {
            let mut err = ApiError::not_found(format!("unknown maneuver `{name}`"));
            err.body.suggestions = suggestions;
            err
        }
        other => ApiError::validation(other.to_string()),
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Slot {
    /// Serializes mutations of one session.
    op: tokio::sync::Mutex<()>,
    record: Mutex<SessionRecord>,
}

impl Slot {
    fn snapshot(&self) -> SessionRecord {
        self.record.lock().expect("session record").clone()
    }
}

pub struct AppState {
    store: Store,
    engine: Engine,
    options: ServiceOptions,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    create_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.sessions.read().expect("session map").get(id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }

    /// Simulates every point of the pending pair that has no evaluation yet,
    /// then marks the session as awaiting a preference. Blocking.
    fn simulate_pending(&self, slot: &Slot) -> Result<(), StoreError> {
        let rec = slot.snapshot();
        if rec.status != Status::Simulating {
            return Ok(());
        }
        let todo: Vec<usize> = match rec.tuner.pending_pair() {
            Some((a, b)) => [a, b].into_iter().filter(|i| !rec.evaluations.contains_key(i)).collect(),
            None => Vec::new(),
        };
        // the two candidates are independent
        let fresh: Vec<(usize, Evaluation)> = std::thread::scope(|s| {
            let jobs: Vec<_> = todo
                .iter()
                .map(|&i| {
                    let rec = &rec;
                    s.spawn(move || match self.engine.evaluate(&rec.id, i, &rec.maneuver, &rec.tuner.points[i]) {
                        Ok(m) => Evaluation { metrics: Some(m), error: None },
                        Err(e) => Evaluation { metrics: None, error: Some(e) },
                    })
                })
                .collect();
            todo.iter().zip(jobs).map(|(&i, j)| (i, j.join().unwrap_or_else(|_| Evaluation { metrics: None, error: Some("simulation panicked".into()) }))).collect()
        });
        let mut guard = slot.record.lock().expect("session record");
        guard.evaluations.extend(fresh);
        guard.status = if guard.tuner.converged { Status::Converged } else { Status::AwaitingPreference };
        guard.updated_at = Utc::now();
        self.store.save(&guard)
    }

    fn persist(&self, slot: &Slot, update: impl FnOnce(&mut SessionRecord)) -> Result<SessionRecord, StoreError> {
        let mut guard = slot.record.lock().expect("session record");
        let mut next = guard.clone();
        update(&mut next);
        next.updated_at = Utc::now();
        self.store.save(&next)?;
        *guard = next.clone();
        Ok(next)
    }
}

/// The tuning service over a data directory.
#[derive(Clone)]
pub struct Service {
    state: Arc<AppState>,
}

impl Service {
    /// Loads every session in `data_dir`. Unreadable files are skipped with a warning.
    pub fn open(data_dir: &Path, options: ServiceOptions) -> Result<Self, StoreError> {
        let store = Store::open(data_dir)?;
        let (records, bad) = store.load_all();
        for e in bad {
            warn!("skipping {e}");
        }
        let sessions = records
            .into_iter()
            .map(|r| (r.id.clone(), Arc::new(Slot { op: tokio::sync::Mutex::new(()), record: Mutex::new(r) })))
            .collect();
        let engine = Engine::new(options.base_config.clone());
        Ok(Self {
            state: Arc::new(AppState { store, engine, options, sessions: RwLock::new(sessions), create_lock: tokio::sync::Mutex::new(()) }),
        })
    }

    /// Finishes simulations interrupted by a crash or shutdown. Blocking;
    /// returns the number of sessions resumed.
    pub fn resume_interrupted(&self) -> Result<usize, StoreError> {
        let slots: Vec<Arc<Slot>> = self.state.sessions.read().expect("session map").values().cloned().collect();
        let mut n = 0;
        for slot in slots {
            if slot.snapshot().status == Status::Simulating {
                info!(id = %slot.snapshot().id, "resuming interrupted simulation");
                self.state.simulate_pending(&slot)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.state.sessions.read().expect("session map").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/sessions", post(create_session))
            .route("/sessions/{id}", get(get_session))
            .route("/sessions/{id}/pair", get(get_pair))
            .route("/sessions/{id}/preference", post(post_preference))
            .route("/sessions/{id}/best", get(get_best))
            .route("/sessions/{id}/trace/{file}", get(get_trace))
            .layer(tower_http::cors::CorsLayer::permissive())
            .with_state(self.state.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub maneuver: String,
    #[serde(default)]
    pub bounds: Option<Bounds>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_pairs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRequest {
    /// The pair being judged, as served by the pair endpoint.
    pub pair: (usize, usize),
    pub outcome: Outcome,
    #[serde(default = "yes")]
    pub stable_a: bool,
    #[serde(default = "yes")]
    pub stable_b: bool,
}

fn yes() -> bool {
    true
}

fn idempotency_key(headers: &HeaderMap) -> ApiResult<Option<String>> {
    match headers.get(IDEMPOTENCY_HEADER) {
        None => Ok(None),
        Some(v) => match v.to_str() {
            Ok(s) if !s.is_empty() && s.len() <= 200 => Ok(Some(s.to_string())),
            _ => Err(ApiError::validation("Idempotency-Key must be 1 to 200 visible ASCII characters")),
        },
    }
}

/// Answers a retried request, or rejects reuse of a key for a different body.
fn replay(rec: &SessionRecord, route: &str, key: &str, request: &serde_json::Value) -> ApiResult<Option<SessionView>> {
    match rec.applied(route, key) {
        Some(a) if &a.request == request => Ok(Some(views::session_view(rec))),
        Some(_) => Err(ApiError::conflict(format!("Idempotency-Key `{key}` was already used with a different request"))),
        None => Ok(None),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let Json(req) = body?;
    let key = idempotency_key(&headers)?;
    let request = serde_json::to_value(&req).expect("request serializes");
    fixture(&req.maneuver).map_err(maneuver_error)?;
    let space = req.bounds.clone().unwrap_or_default().space();
    let max_pairs = req.max_pairs.unwrap_or(DEFAULT_MAX_PAIRS);
    if max_pairs == 0 {
        return Err(ApiError::validation("max_pairs must be at least 1"));
    }
    let tuner = TuningSession::new(space, TunerConfig { seed: req.seed, ..TunerConfig::default() })?;

    let _create = st.create_lock.lock().await;
    if let Some(k) = &key {
        let existing: Vec<Arc<Slot>> = st.sessions.read().expect("session map").values().cloned().collect();
        for slot in existing {
            if let Some(view) = replay(&slot.snapshot(), "create", k, &request)? {
                return Ok((StatusCode::CREATED, Json(view)));
            }
        }
    }
    let now = Utc::now();
    let rec = SessionRecord {
        schema_version: SESSION_FILE_VERSION,
        id: uuid::Uuid::new_v4().to_string(),
        maneuver: req.maneuver.clone(),
        status: Status::Simulating,
        created_at: now,
        updated_at: now,
        max_pairs,
        tuner,
        evaluations: Default::default(),
        applied: key.map(|key| AppliedRequest { key, route: "create".into(), request }).into_iter().collect(),
    };
    st.store.save(&rec)?;
    let id = rec.id.clone();
    let slot = Arc::new(Slot { op: tokio::sync::Mutex::new(()), record: Mutex::new(rec) });
    st.sessions.write().expect("session map").insert(id.clone(), slot.clone());
    let _op = slot.op.lock().await;
    drop(_create);
    info!(%id, maneuver = %req.maneuver, "session created");
    let (st2, slot2) = (st.clone(), slot.clone());
    blocking(move || st2.simulate_pending(&slot2)).await??;
    Ok((StatusCode::CREATED, Json(views::session_view(&slot.snapshot()))))
}

async fn get_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    Ok(Json(views::session_view(&st.slot(&id)?.snapshot())))
}

fn require_awaiting(rec: &SessionRecord) -> ApiResult<(usize, usize)> {
    match (rec.status, rec.tuner.pending_pair()) {
        (Status::AwaitingPreference, Some(pair)) => Ok(pair),
        (Status::Converged, _) => Err(ApiError::conflict("session has converged; no pending comparison")),
        (Status::Simulating, _) => Err(ApiError::conflict("session is simulating the next pair; poll the session")),
        (Status::AwaitingPreference, None) => Err(ApiError::internal("awaiting a preference without a pending pair")),
    }
}

#[derive(Debug, Deserialize)]
struct PairQuery {
    /// Buckets per downsampled series; each contributes its min and max.
    buckets: Option<usize>,
}

async fn get_pair(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<PairQuery>,
) -> ApiResult<Json<PairView>> {
    let rec = st.slot(&id)?.snapshot();
    let (a, b) = require_awaiting(&rec)?;
    let buckets = q.buckets.unwrap_or(DEFAULT_BUCKETS).clamp(1, 100_000);
    let st2 = st.clone();
    let view = blocking(move || {
        let candidate = |i: usize, label: &str| {
            let point = views::point_view(&rec, i);
            let series = if point.simulated == Some(true) {
                st2.engine.trace(&rec.id, i, &rec.maneuver, &rec.tuner.points[i]).ok().map(|t| views::series(&t, buckets))
            } else {
                None
            };
            CandidateView { point, trace_url: format!("/sessions/{}/trace/{label}.csv", rec.id), series }
        };
        PairView {
            schema_version: API_SCHEMA_VERSION,
            session_id: rec.id.clone(),
            status: rec.status,
            iteration: rec.tuner.records.len(),
            max_pairs: rec.max_pairs,
            sample_time: st2.engine.base_config().vehicle.sample_time,
            a: candidate(a, "a"),
            b: candidate(b, "b"),
        }
    })
    .await?;
    Ok(Json(view))
}

async fn get_trace(
    State(st): State<Arc<AppState>>,
    UrlPath((id, file)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let rec = st.slot(&id)?.snapshot();
    let (a, b) = require_awaiting(&rec)?;
    let index = match file.as_str() {
        "a.csv" => a,
        "b.csv" => b,
        _ => return Err(ApiError::not_found(format!("unknown trace `{file}`; expected a.csv or b.csv"))),
    };
    if let Some(e) = rec.evaluations.get(&index).and_then(|e| e.error.clone()) {
        return Err(ApiError::conflict(format!("candidate {} did not simulate: {e}", &file[..1])));
    }
    let st2 = st.clone();
    let csv = blocking(move || st2.engine.trace(&rec.id, index, &rec.maneuver, &rec.tuner.points[index]).map(|t| t.to_csv_string()))
        .await?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

async fn post_preference(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Result<Json<PreferenceRequest>, JsonRejection>,
) -> ApiResult<Json<SessionView>> {
    let slot = st.slot(&id)?;
    let Json(req) = body?;
    let key = idempotency_key(&headers)?;
    let request = serde_json::to_value(&req).expect("request serializes");
    let _op = slot.op.lock().await;
    let rec = slot.snapshot();
    if let Some(k) = &key {
        if let Some(view) = replay(&rec, "preference", k, &request)? {
            return Ok(Json(view));
        }
    }
    let pending = require_awaiting(&rec)?;
    if req.pair != pending {
        let (a, b) = req.pair;
        if rec.tuner.records.iter().any(|r| r.pair == (a, b) || r.pair == (b, a)) {
            return Err(TunerError::DuplicatePreference(a, b).into());
        }
        return Err(ApiError::conflict(format!("pair ({a}, {b}) is not pending; the pending pair is {pending:?}")));
    }
    // a candidate that failed to simulate is unstable whatever the judgment
    let ran = |i: usize| rec.evaluations.get(&i).is_some_and(|e| e.completed());
    let record = PreferenceRecord {
        pair: req.pair,
        outcome: req.outcome,
        stable_a: req.stable_a && ran(req.pair.0),
        stable_b: req.stable_b && ran(req.pair.1),
    };
    let mut tuner = rec.tuner.clone();
    tuner.record_preference(record)?;
    if tuner.records.len() >= rec.max_pairs {
        tuner.stop();
    }
    let saved = st.persist(&slot, |r| {
        r.tuner = tuner;
        r.status = if r.tuner.converged { Status::Converged } else { Status::Simulating };
        if let Some(key) = key {
            r.applied.push(AppliedRequest { key, route: "preference".into(), request });
        }
    })?;
    info!(%id, iteration = saved.tuner.records.len(), status = ?saved.status, "preference recorded");
    if st.options.halt_before_simulation {
        return Err(ApiError::internal("halted before simulation"));
    }
    let (st2, slot2) = (st.clone(), slot.clone());
    blocking(move || st2.simulate_pending(&slot2)).await??;
    Ok(Json(views::session_view(&slot.snapshot())))
}

async fn get_best(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<BestView>> {
    let rec = st.slot(&id)?.snapshot();
    let best = rec.tuner.best_so_far()?;
    Ok(Json(BestView {
        schema_version: API_SCHEMA_VERSION,
        session_id: rec.id.clone(),
        status: rec.status,
        iteration: rec.tuner.records.len(),
        unstable_excluded: best.as_ref().map(|b| b.unstable_excluded.clone()).unwrap_or_default(),
        best: best.map(|b| views::point_view(&rec, b.index)),
    }))
}
