//! Test client and synthetic uploads shared by the API tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;
use tower::ServiceExt;

use seqmap_core::ingest::{write_sequence, ScanSpec};
use seqmap_core::model::{Frame, Sequence};
use seqmap_server::{router, AppState, ServerConfig};

pub const ROWS: usize = 20;
pub const COLS: usize = 28;
pub const FRAMES: usize = 14;

pub fn config(dir: &Path, persist: bool) -> ServerConfig {
    ServerConfig {
        session_dir: dir.to_path_buf(),
        persist,
        ui_dir: None,
        cors_origin: None,
    }
}

pub fn app(dir: &Path) -> Router {
    router(AppState::new(config(dir, false)))
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("not JSON ({e}): {}", String::from_utf8_lossy(&self.bytes)))
    }

    /// Asserts the status and, for success, that the body matches `schema`.
    pub fn expect(self, status: u16, schema: &str) -> Value {
        assert_eq!(self.status.as_u16(), status, "body: {}", String::from_utf8_lossy(&self.bytes));
        let v = self.json();
        validate(schema, &v);
        v
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: impl Into<Body>) -> Reply {
    let req = Request::builder().method(method).uri(uri).body(body.into()).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let content_type = res
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply {
        status,
        content_type,
        bytes,
    }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, Body::empty()).await
}

pub async fn post(app: &Router, uri: &str, json: Value) -> Reply {
    call(app, Method::POST, uri, json.to_string()).await
}

pub fn schema_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.json"))
}

pub fn validate(name: &str, v: &Value) {
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(schema_path(name)).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(v).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{name} schema violations: {errors:#?}\nbody: {v:#}");
}

/// A bright blob whose length oscillates over time on a dim noisy background.
pub fn tongue_sequence(phase: usize, deg: f64, seed: u64) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 2.0).unwrap();
    let (s, c) = deg.to_radians().sin_cos();
    let frames = (0..FRAMES)
        .map(|k| {
            let t = (k + phase) as f64;
            let a = COLS as f64 * (0.28 + 0.08 * (t * 0.7).sin());
            let b = ROWS as f64 * (0.2 + 0.04 * (t * 0.45).cos());
            Frame::from_fn(ROWS, COLS, |r, col| {
                let x = col as f64 - (COLS as f64 - 1.0) / 2.0;
                let y = ROWS as f64 / 2.0 - r as f64;
                let u = x * c + y * s;
                let v = -x * s + y * c;
                let inside = if (u / a).powi(2) + (v / b).powi(2) <= 1.0 { 90.0 } else { 0.0 };
                inside + 10.0 + noise.sample(&mut rng)
            })
            .unwrap()
        })
        .collect();
    Sequence::new(frames, "synthetic", "tongue").unwrap()
}

pub fn csv(seq: &Sequence) -> String {
    write_sequence(seq, &ScanSpec::blank(FRAMES, ROWS, COLS))
}

pub fn upload_uri(id: &str, which: u8) -> String {
    format!("/sessions/{id}/upload?which={which}&scan=blank&nframe={FRAMES}&nrow={ROWS}&ncol={COLS}")
}

pub async fn create(app: &Router, seed: u64) -> String {
    let v = post(app, "/sessions", serde_json::json!({ "seed": seed })).await.expect(201, "session");
    v["id"].as_str().unwrap().to_string()
}

/// Drives a session from creation to the Registered state with automatic
/// segmentation and registration.
pub async fn registered_session(app: &Router, seed: u64) -> String {
    let id = create(app, seed).await;
    let a = csv(&tongue_sequence(3, 0.0, 1));
    let b = csv(&tongue_sequence(0, 4.0, 2));
    call(app, Method::POST, &upload_uri(&id, 1), a).await.expect(200, "upload");
    call(app, Method::POST, &upload_uri(&id, 2), b).await.expect(200, "upload");
    post(app, &format!("/sessions/{id}/roi"), serde_json::json!({})).await.expect(200, "roi");
    post(app, &format!("/sessions/{id}/segment"), serde_json::json!({"mode": "auto"})).await.expect(200, "segment");
    post(app, &format!("/sessions/{id}/register"), serde_json::json!({"mode": "auto"})).await.expect(200, "register");
    id
}

pub async fn analyzed_session(app: &Router, seed: u64, analyze: Value) -> (String, Value) {
    let id = registered_session(app, seed).await;
    post(app, &format!("/sessions/{id}/confirm"), serde_json::json!({"accepted": true})).await.expect(200, "confirm");
    let m = post(app, &format!("/sessions/{id}/analyze"), analyze).await.expect(200, "manifest");
    (id, m)
}
