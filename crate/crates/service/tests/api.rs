use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use slipctl::trace::TRACE_COLUMNS;
use slipctl_service::{Service, ServiceOptions, Status, Store, API_SCHEMA_VERSION};
use tower::ServiceExt;

const MANEUVER: &str = "fig6-brake-mu-step";

fn small_bounds() -> Value {
    json!({ "p": [1.0, 10000.0], "q": [1.0, 10000.0], "horizon": [10.0, 60.0] })
}

fn create_body(seed: u64) -> Value {
    json!({ "maneuver": MANEUVER, "bounds": small_bounds(), "seed": seed })
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, key: Option<&str>) -> (StatusCode, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    if let Some(k) = key {
        req = req.header("Idempotency-Key", k);
    }
    let body = body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty);
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>, key: Option<&str>) -> (StatusCode, Value) {
    let (s, text) = call(app, method, uri, body, key).await;
    (s, serde_json::from_str(&text).unwrap_or(Value::Null))
}

fn app(dir: &Path) -> Router {
    Service::open(dir, ServiceOptions::default()).unwrap().router()
}

async fn create(app: &Router, seed: u64) -> Value {
    let (s, v) = call_json(app, "POST", "/sessions", Some(create_body(seed)), None).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v
}

fn preference(pair: &Value, outcome: &str) -> Value {
    json!({ "pair": pair, "outcome": outcome, "stable_a": true, "stable_b": true })
}

#[tokio::test]
async fn create_simulates_the_seed_pair() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let v = create(&app, 1).await;
    assert_eq!(v["schema_version"], API_SCHEMA_VERSION);
    assert_eq!(v["status"], "awaiting_preference");
    assert_eq!(v["pending_pair"], json!([0, 1]));
    assert_eq!(v["iteration"], 0);
    assert!(v["points"].as_array().unwrap().iter().all(|p| p["simulated"] == true && p["metrics"]["overshoot"].is_number()));
    let id = v["id"].as_str().unwrap();
    assert!(dir.path().join(format!("{id}.json")).exists());

    let (s, pair) = call_json(&app, "GET", &format!("/sessions/{id}/pair?buckets=50"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(pair["a"]["index"], 0);
    assert_eq!(pair["b"]["index"], 1);
    for side in ["a", "b"] {
        let series = &pair[side]["series"];
        for name in ["kappa_l", "kappa_ref", "t_m", "v_x", "kappa_hat"] {
            let t = series[name]["t"].as_array().unwrap();
            assert!(t.len() <= 100 && t.len() == series[name]["y"].as_array().unwrap().len());
        }
        assert!(pair[side]["metrics"]["tracking_rms"].is_number());
        assert!(pair[side]["params"]["horizon"].as_u64().unwrap() <= 60);
    }

    let (s, csv) = call(&app, "GET", &format!("/sessions/{id}/trace/a.csv"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), TRACE_COLUMNS.join(","));
    let steps = slipctl::scenario::fixture(MANEUVER).unwrap().steps(slipctl::config::SimConfig::default().vehicle.sample_time);
    assert_eq!(lines.count(), steps);
    let (s, _) = call(&app, "GET", &format!("/sessions/{id}/trace/c.csv"), None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn downsampled_series_keep_the_trace_peak() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 4).await["id"].as_str().unwrap().to_string();
    let (_, pair) = call_json(&app, "GET", &format!("/sessions/{id}/pair?buckets=20"), None, None).await;
    let (_, csv) = call(&app, "GET", &format!("/sessions/{id}/trace/a.csv"), None, None).await;
    let col = TRACE_COLUMNS.iter().position(|c| *c == "kappa_l").unwrap();
    let full = csv.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse::<f64>().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let shown = pair["a"]["series"]["kappa_l"]["y"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(full, shown);
}

#[tokio::test]
async fn duplicate_creates_get_distinct_ids() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let a = create(&app, 1).await;
    let b = create(&app, 1).await;
    assert_ne!(a["id"], b["id"]);
}

#[tokio::test]
async fn invalid_requests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let bad = json!({ "maneuver": MANEUVER, "bounds": { "p": [100.0, 1.0], "q": [1.0, 2.0], "horizon": [10.0, 20.0] } });
    let (s, v) = call_json(&app, "POST", "/sessions", Some(bad), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["code"], "validation");

    let (s, v) = call_json(&app, "POST", "/sessions", Some(json!({ "maneuver": "fig6" })), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["suggestions"][0], MANEUVER);

    let (s, _) = call_json(&app, "GET", "/sessions/nope", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let id = create(&app, 2).await["id"].as_str().unwrap().to_string();
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/preference"), Some(json!({ "pair": [0, 1], "outcome": "maybe" })), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let (s, _) = call_json(&app, "GET", &format!("/sessions/{id}/best"), None, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn preferences_advance_the_session() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 3).await["id"].as_str().unwrap().to_string();
    let uri = format!("/sessions/{id}/preference");

    let (s, v) = call_json(&app, "POST", &uri, Some(preference(&json!([0, 1]), "b_preferred")), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["status"], "awaiting_preference");
    assert_eq!(v["iteration"], 1);
    assert_eq!(v["pending_pair"], json!([1, 2]));
    assert_eq!(v["points"][2]["simulated"], true);

    // resubmitting the judged pair is a conflict
    let (s, _) = call_json(&app, "POST", &uri, Some(preference(&json!([0, 1]), "b_preferred")), None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, pair) = call_json(&app, "GET", &format!("/sessions/{id}/pair"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(pair["b"]["index"], 2);
    assert_eq!(pair["iteration"], 1);

    let (s, best) = call_json(&app, "GET", &format!("/sessions/{id}/best"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(best["best"]["index"], 1);
}

#[tokio::test]
async fn retries_with_the_same_key_apply_once() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s1, a) = call_json(&app, "POST", "/sessions", Some(create_body(5)), Some("create-1")).await;
    let (s2, b) = call_json(&app, "POST", "/sessions", Some(create_body(5)), Some("create-1")).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::CREATED));
    assert_eq!(a["id"], b["id"]);
    let (s, _) = call_json(&app, "POST", "/sessions", Some(create_body(6)), Some("create-1")).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let id = a["id"].as_str().unwrap();
    let uri = format!("/sessions/{id}/preference");
    let body = preference(&json!([0, 1]), "a_preferred");
    let (s1, first) = call_json(&app, "POST", &uri, Some(body.clone()), Some("pref-1")).await;
    let (s2, again) = call_json(&app, "POST", &uri, Some(body), Some("pref-1")).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(first, again);
    assert_eq!(again["iteration"], 1);
    let (s, _) = call_json(&app, "POST", &uri, Some(preference(&json!([0, 2]), "tie")), Some("pref-1")).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn budget_converges_the_session() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let body = json!({ "maneuver": MANEUVER, "bounds": small_bounds(), "max_pairs": 1 });
    let (_, v) = call_json(&app, "POST", "/sessions", Some(body), None).await;
    let id = v["id"].as_str().unwrap();
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/preference"), Some(preference(&json!([0, 1]), "a_preferred")), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "converged");
    assert_eq!(v["pending_pair"], Value::Null);
    let (s, _) = call_json(&app, "POST", &format!("/sessions/{id}/preference"), Some(preference(&json!([0, 2]), "a_preferred")), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call_json(&app, "GET", &format!("/sessions/{id}/pair"), None, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, best) = call_json(&app, "GET", &format!("/sessions/{id}/best"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(best["best"]["index"], 0);
    assert_eq!(best["status"], "converged");
}

#[tokio::test]
async fn unstable_judgments_are_excluded_from_best() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 8).await["id"].as_str().unwrap().to_string();
    let body = json!({ "pair": [0, 1], "outcome": "tie", "stable_a": false, "stable_b": false });
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/preference"), Some(body), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["points"][0]["judged_stable"], false);
    let (_, best) = call_json(&app, "GET", &format!("/sessions/{id}/best"), None, None).await;
    assert_eq!(best["best"], Value::Null);
}

#[tokio::test]
async fn crash_between_store_and_simulate_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let svc = Service::open(dir.path(), ServiceOptions { halt_before_simulation: true, ..ServiceOptions::default() }).unwrap();
        let app = svc.router();
        let id = create(&app, 9).await["id"].as_str().unwrap().to_string();
        let (s, _) = call_json(&app, "POST", &format!("/sessions/{id}/preference"), Some(preference(&json!([0, 1]), "b_preferred")), Some("k")).await;
        assert_eq!(s, StatusCode::INTERNAL_SERVER_ERROR);
        id
    };
    let store = Store::open(dir.path()).unwrap();
    let on_disk = store.load(&store.path(&id)).unwrap();
    assert_eq!(on_disk.status, Status::Simulating);
    assert_eq!(on_disk.tuner.records.len(), 1);
    assert!(!on_disk.evaluations.contains_key(&2));

    let svc = Service::open(dir.path(), ServiceOptions::default()).unwrap();
    let resumer = svc.clone();
    assert_eq!(tokio::task::spawn_blocking(move || resumer.resume_interrupted()).await.unwrap().unwrap(), 1);
    let app = svc.router();
    let (_, v) = call_json(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(v["status"], "awaiting_preference");
    assert_eq!(v["iteration"], 1);
    assert_eq!(v["preferences"][0]["outcome"], "b_preferred");
    assert_eq!(v["points"][2]["simulated"], true);
    // the retried request is recognised after the restart
    let (s, again) = call_json(&app, "POST", &format!("/sessions/{id}/preference"), Some(preference(&json!([0, 1]), "b_preferred")), Some("k")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again["iteration"], 1);
}

#[tokio::test]
async fn unreadable_session_files_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let id = create(&app(dir.path()), 10).await["id"].as_str().unwrap().to_string();
    let path = dir.path().join(format!("{id}.json"));
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["schema_version"] = json!(99);
    std::fs::write(dir.path().join("old.json"), v.to_string()).unwrap();
    let svc = Service::open(dir.path(), ServiceOptions::default()).unwrap();
    assert_eq!(svc.session_ids(), vec![id]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn sessions_proceed_concurrently() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let tasks: Vec<_> = (0..4)
        .map(|seed| {
            let app = app.clone();
            tokio::spawn(async move {
                let id = create(&app, seed).await["id"].as_str().unwrap().to_string();
                let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/preference"), Some(preference(&json!([0, 1]), "a_preferred")), None).await;
                assert_eq!(s, StatusCode::OK);
                v["iteration"].as_u64().unwrap()
            })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), 1);
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 4);
}
