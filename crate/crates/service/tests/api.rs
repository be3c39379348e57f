use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use nest_core::net::Bound;
use nest_core::session::{convergence_check, import_json, new_session, SessionConfig, SessionDocument};
use nest_service::api::{QueryRecord, SliceGrid, StatusRecord};
use nest_service::{router, AppState, Store};

fn quick_config(seed: u64) -> SessionConfig {
    let mut cfg = SessionConfig::new(vec![Bound::new(-1.0, 1.0), Bound::new(0.0, 10.0)]);
    cfg.seed = seed;
    cfg.train.epochs_per_trial = 4;
    cfg.acq.candidate_count = 32;
    cfg.acq.restarts = 1;
    cfg.acq.refine_iterations = 2;
    cfg.acq.mc_samples = 8;
    cfg.acq.lookahead_subsample = 8;
    cfg
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn create(app: &Router, cfg: &SessionConfig) -> String {
    let (status, body) = call(app, Method::POST, "/sessions", Some(json!({ "config": cfg }))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["id"].as_str().unwrap().to_string()
}

async fn next(app: &Router, id: &str) -> QueryRecord {
    let (status, body) = call(app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_value(body).unwrap()
}

async fn respond(app: &Router, id: &str, stimulus: &[f64], response: u8) -> (StatusCode, Value) {
    call(
        app,
        Method::POST,
        &format!("/sessions/{id}/responses"),
        Some(json!({ "stimulus": stimulus, "response": response })),
    )
    .await
}

async fn export(app: &Router, id: &str) -> SessionDocument {
    let (status, body) = call(app, Method::GET, &format!("/sessions/{id}/export"), None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_value(body).unwrap()
}

fn memory_app() -> Router {
    router(AppState::in_memory(), None)
}

#[tokio::test]
async fn create_validates_and_assigns_distinct_ids() {
    let app = memory_app();
    let cfg = quick_config(1);
    let (status, body) = call(&app, Method::POST, "/sessions", Some(json!({ "config": cfg }))).await;
    assert_eq!(status, StatusCode::CREATED);
    let status_rec: StatusRecord = serde_json::from_value(body["status"].clone()).unwrap();
    assert_eq!(status_rec.trial_count, 0);
    assert!(!status_rec.converged);
    assert!(status_rec.snr.is_none());
    let a = body["id"].as_str().unwrap().to_string();
    let b = create(&app, &cfg).await;
    assert_ne!(a, b);

    let mut bad = cfg.clone();
    bad.scale.alpha = 0.6;
    bad.scale.gamma_lapse = 0.5;
    let (status, body) = call(&app, Method::POST, "/sessions", Some(json!({ "config": bad }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["field"].as_str().unwrap().starts_with("scale"), "{body}");

    let (status, _) = call(
        &app,
        Method::POST,
        "/sessions",
        Some(json!({ "config": cfg, "labels": [{ "name": "only one" }] })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (_, list) = call(&app, Method::GET, "/sessions", None).await;
    assert_eq!(list.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn next_is_idempotent_until_a_response_arrives() {
    let app = memory_app();
    let id = create(&app, &quick_config(2)).await;
    let q1 = next(&app, &id).await;
    let q2 = next(&app, &id).await;
    assert_eq!(q1, q2);
    assert_eq!(q1.trial_index, 1);
    assert!(q1.stimulus[0] >= -1.0 && q1.stimulus[0] <= 1.0);
    assert!(q1.stimulus[1] >= 0.0 && q1.stimulus[1] <= 10.0);

    let (status, body) = respond(&app, &id, &q1.stimulus, 1).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["trial_count"], 1);
    assert_eq!(next(&app, &id).await.trial_index, 2);

    let (status, _) = call(&app, Method::GET, "/sessions/nope/next", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn mismatched_stimulus_conflicts_without_changing_state() {
    let app = memory_app();
    let id = create(&app, &quick_config(3)).await;
    let q = next(&app, &id).await;
    respond(&app, &id, &q.stimulus, 0).await;
    let before = export(&app, &id).await;
    let q = next(&app, &id).await;
    let stale = vec![q.stimulus[0] + 1e-6, q.stimulus[1]];
    let (status, _) = respond(&app, &id, &stale, 1).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = respond(&app, &id, &q.stimulus[..1], 1).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = respond(&app, &id, &q.stimulus, 2).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(export(&app, &id).await, before);
}

#[tokio::test]
async fn service_matches_the_library_query_sequence() {
    let app = memory_app();
    let cfg = quick_config(7);
    let id = create(&app, &cfg).await;
    let mut lib = new_session(cfg).unwrap();
    for t in 0..30u8 {
        let q = next(&app, &id).await;
        assert_eq!(q.stimulus, lib.pending.stimulus);
        assert_eq!(q.was_random_exploration, lib.pending.explored);
        let r = t % 2;
        let (status, body) = respond(&app, &id, &q.stimulus, r).await;
        assert_eq!(status, StatusCode::OK);
        lib.record_response(&q.stimulus, r == 1).unwrap();
        let s: StatusRecord = serde_json::from_value(body).unwrap();
        assert_eq!(s.trial_count, lib.trial_count);
        assert_eq!(s.converged, lib.converged);
    }
    let doc = export(&app, &id).await;
    assert_eq!(serde_json::to_string_pretty(&doc).unwrap(), lib.export_json());
}

#[tokio::test]
async fn status_reflects_the_exported_state() {
    let app = memory_app();
    let id = create(&app, &quick_config(4)).await;
    for r in [1u8, 1, 0, 1, 0] {
        let q = next(&app, &id).await;
        respond(&app, &id, &q.stimulus, r).await;
    }
    let (_, body) = call(&app, Method::GET, &format!("/sessions/{id}/status"), None).await;
    let s: StatusRecord = serde_json::from_value(body).unwrap();
    assert_eq!(s.class_counts.positive + s.class_counts.negative, s.trial_count);
    assert_eq!((s.class_counts.positive, s.class_counts.negative), (3, 2));
    assert_eq!(s.fisher_history_tail.len(), 5);
    assert_eq!(s.recent_trials.len(), 5);
    assert_eq!(s.recent_trials[4].trial, 5);
    let lib = import_json(&serde_json::to_string(&export(&app, &id).await).unwrap()).unwrap();
    let conv = convergence_check(&lib);
    assert_eq!(s.converged, conv.converged);
    assert_eq!(s.snr, conv.snr);
}

#[tokio::test]
async fn slices_cover_the_plane_and_match_library_predictions() {
    let app = memory_app();
    let cfg = quick_config(5);
    let id = create(&app, &cfg).await;
    for r in [1u8, 0, 1] {
        let q = next(&app, &id).await;
        respond(&app, &id, &q.stimulus, r).await;
    }
    let (status, body) = call(&app, Method::GET, &format!("/sessions/{id}/slice?std=true"), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let grid: SliceGrid = serde_json::from_value(body).unwrap();
    assert_eq!(grid.values.len(), 4096);
    assert_eq!(grid.std.as_ref().unwrap().len(), 4096);
    assert!(grid.values.iter().all(|v| (grid.alpha..=grid.upper).contains(v)));
    assert_eq!(grid.trials.len(), 3);

    let lib = import_json(&serde_json::to_string(&export(&app, &id).await).unwrap()).unwrap();
    let (status, body) = call(&app, Method::GET, &format!("/sessions/{id}/slice?resolution=5"), None).await;
    assert_eq!(status, StatusCode::OK);
    let grid: SliceGrid = serde_json::from_value(body).unwrap();
    let points: Vec<Vec<f64>> = grid
        .y_values
        .iter()
        .flat_map(|&y| grid.x_values.iter().map(move |&x| vec![x, y]))
        .collect();
    assert_eq!(grid.values, lib.predict(&points).unwrap());
    let at_trials: Vec<Vec<f64>> = lib.dataset.records.iter().map(|r| r.stimulus.clone()).collect();
    let direct = lib.predict(&at_trials).unwrap();
    for (p, v) in at_trials.iter().zip(direct) {
        let snap = lib.snapshot();
        assert_eq!(snap.predict(&lib.net, p).unwrap(), v);
    }

    for bad in ["dim_x=0&dim_y=0", "dim_x=3", "resolution=1", "fixed=0.0", "fixed=0.0,20.0&dim_x=0&dim_y=0"] {
        let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}/slice?{bad}"), None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
    }
}

#[tokio::test]
async fn export_import_and_finish() {
    let app = memory_app();
    let cfg = quick_config(6);
    let id = create(&app, &cfg).await;
    for r in [0u8, 1, 1] {
        let q = next(&app, &id).await;
        respond(&app, &id, &q.stimulus, r).await;
    }
    let doc = export(&app, &id).await;
    doc.validate().unwrap();

    let (status, body) = call(&app, Method::POST, "/sessions/import", Some(json!({ "document": doc }))).await;
    assert_eq!(status, StatusCode::CREATED);
    let copy = body["id"].as_str().unwrap().to_string();
    let mut lib = import_json(&serde_json::to_string(&doc).unwrap()).unwrap();
    for r in [1u8, 0] {
        let a = next(&app, &id).await;
        let b = next(&app, &copy).await;
        assert_eq!(a.stimulus, lib.pending.stimulus);
        assert_eq!(b.stimulus, lib.pending.stimulus);
        respond(&app, &id, &a.stimulus, r).await;
        respond(&app, &copy, &b.stimulus, r).await;
        lib.record_response(&a.stimulus, r == 1).unwrap();
    }
    assert_eq!(export(&app, &id).await, export(&app, &copy).await);

    let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/finish"), None).await;
    assert_eq!(status, StatusCode::OK);
    let last: SessionDocument = serde_json::from_value(body).unwrap();
    assert_eq!(last.trial_count, 5);
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/finish"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{copy}/status"), None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(Some(Store::open(dir.path()).unwrap())).unwrap(), None);
    let id = create(&app, &quick_config(8)).await;
    for r in [1u8, 0] {
        let q = next(&app, &id).await;
        respond(&app, &id, &q.stimulus, r).await;
    }
    let before = export(&app, &id).await;
    assert!(dir.path().join(format!("{id}.json")).exists());
    drop(app);

    let app = router(AppState::new(Some(Store::open(dir.path()).unwrap())).unwrap(), None);
    assert_eq!(export(&app, &id).await, before);
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/finish"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(!dir.path().join(format!("{id}.json")).exists());
    assert!(dir.path().join("finished").join(format!("{id}.json")).exists());
    let app = router(AppState::new(Some(Store::open(dir.path()).unwrap())).unwrap(), None);
    let (_, list) = call(&app, Method::GET, "/sessions", None).await;
    assert!(list.as_array().unwrap().is_empty());
}

#[tokio::test]
async fn static_assets_are_served_with_an_index_fallback() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>console</html>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let app = router(AppState::in_memory(), Some(dir.path().to_path_buf()));
    let (status, body) = call(&app, Method::GET, "/app.js", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("console.log(1)".into()));
    let (status, body) = call(&app, Method::GET, "/sessions/view/abc", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("<html>console</html>".into()));
    let (status, _) = call(&app, Method::GET, "/sessions", None).await;
    assert_eq!(status, StatusCode::OK);
}
