mod common;

use axum::body::Body;
use axum::http::Method;
use serde_json::{json, Value};

use common::*;
use seqmap_server::{AppState, FramePayload};

fn payload(v: &Value) -> FramePayload {
    serde_json::from_value(json!({
        "rows": v["rows"], "cols": v["cols"], "dtype": v["dtype"], "data": v["data"]
    }))
    .unwrap()
}

#[tokio::test]
async fn create_returns_a_fresh_created_session() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let a = post(&app, "/sessions", json!({})).await.expect(201, "session");
    assert_eq!(a["state"], "created");
    let b = call(&app, Method::POST, "/sessions", Body::empty()).await.expect(201, "session");
    assert_ne!(a["id"], b["id"]);
    let again = get(&app, &format!("/sessions/{}", a["id"].as_str().unwrap())).await.expect(200, "session");
    assert_eq!(again["id"], a["id"]);
    let h = get(&app, "/health").await.expect(200, "health");
    assert_eq!(h["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(h["sessions"], 2);
}

#[tokio::test]
async fn full_flow_serves_maps_movies_and_height_fields() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 7).await;

    let a = csv(&tongue_sequence(3, 0.0, 1));
    let b = csv(&tongue_sequence(0, 4.0, 2));
    let u1 = call(&app, Method::POST, &upload_uri(&id, 1), a).await.expect(200, "upload");
    assert_eq!((u1["state"].as_str(), u1["frame_count"].as_u64()), (Some("created"), Some(FRAMES as u64)));
    assert_eq!(u1["reference_index"], 5);
    let reference = payload(&u1["reference"]).decode().unwrap();
    assert_eq!(reference.len(), ROWS * COLS);
    let u2 = call(&app, Method::POST, &upload_uri(&id, 2), b).await.expect(200, "upload");
    assert_eq!(u2["state"], "scanned");

    let h = get(&app, &format!("/sessions/{id}/histogram?which=1&nbins=16")).await.expect(200, "histogram");
    assert_eq!(h["counts"].as_array().unwrap().len(), 16);
    assert_eq!(h["n_pixels"], FRAMES * ROWS * COLS);

    post(&app, &format!("/sessions/{id}/roi"), json!({})).await.expect(200, "roi");
    let seg = post(&app, &format!("/sessions/{id}/segment"), json!({"mode": "auto", "groups": 2}))
        .await
        .expect(200, "segment");
    assert_eq!(seg["fitted_groups"], json!([2, 2]));
    let c1 = seg["thresholds"][0].as_f64().unwrap();
    assert!(c1 > 10.0 && c1 < 100.0, "cutoff {c1} should sit between background and tissue");

    let reg = post(&app, &format!("/sessions/{id}/register"), json!({"mode": "auto"}))
        .await
        .expect(200, "register");
    let pairs = reg["pair_count"].as_u64().unwrap() as usize;
    assert!(pairs >= 1);
    let overlay = get(&app, reg["overlay"].as_str().unwrap()).await;
    assert_eq!(overlay.status, 200);
    assert_eq!(overlay.content_type.as_deref(), Some("image/png"));
    assert_eq!(&overlay.bytes[1..4], b"PNG");

    post(&app, &format!("/sessions/{id}/confirm"), json!({"accepted": true})).await.expect(200, "confirm");
    let m = post(&app, &format!("/sessions/{id}/analyze"), json!({"display": "all", "pmap_dim": 3, "alpha": 0.1}))
        .await
        .expect(200, "manifest");
    assert_eq!(m["status"], "completed");
    assert_eq!(m["parameters"]["alpha"], 0.1);
    assert_eq!(m["parameters"]["seed"], 7);

    let s = get(&app, &format!("/sessions/{id}")).await.expect(200, "session");
    assert_eq!(s["state"], "analyzed");
    assert_eq!(s["busy"], Value::Null);
    assert_eq!(s["manifest"], m);

    for kind in ["O1", "O2", "R1", "R2", "D", "S", "T", "P"] {
        let v = get(&app, &format!("/sessions/{id}/maps/{kind}/0")).await.expect(200, "map");
        assert_eq!(v["kind"], kind);
        assert_eq!(payload(&v).decode().unwrap().len(), ROWS * COLS);
        if !kind.starts_with(['O', 'R']) {
            assert_eq!(v["frame_count"], pairs, "{kind}");
        }
        let gif = get(&app, &format!("/sessions/{id}/movies/{kind}")).await;
        assert_eq!(gif.status, 200);
        assert_eq!(gif.content_type.as_deref(), Some("image/gif"));
        assert_eq!(&gif.bytes[..6], b"GIF89a");
    }
    let last = pairs - 1;
    get(&app, &format!("/sessions/{id}/maps/T/{last}")).await.expect(200, "map");
    get(&app, &format!("/sessions/{id}/maps/T/{pairs}")).await.expect(404, "error");

    // The served T map is the CSV on disk at f32 precision.
    let t = payload(&get(&app, &format!("/sessions/{id}/maps/T/0")).await.json()).decode().unwrap();
    let text = std::fs::read_to_string(dir.path().join(&id).join("output/maps/T/T_0000.csv")).unwrap();
    let disk: Vec<f64> = text
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .flat_map(|l| l.split(',').map(|c| c.parse::<f64>().unwrap() as f32 as f64).collect::<Vec<_>>())
        .collect();
    assert_eq!(t, disk);

    let hf = get(&app, &format!("/sessions/{id}/heightfield/0")).await.expect(200, "heightfield");
    let p = payload(&get(&app, &format!("/sessions/{id}/maps/P/0")).await.json()).decode().unwrap();
    let values: Vec<f64> = hf["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap() as f32 as f64).collect();
    assert_eq!(values, p);

    let png = get(&app, &format!("/sessions/{id}/movies/P/0")).await;
    assert_eq!(png.content_type.as_deref(), Some("image/png"));
    get(&app, &format!("/sessions/{id}/movies/P/{pairs}")).await.expect(404, "error");
}

#[tokio::test]
async fn analyze_before_confirm_is_rejected_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = registered_session(&app, 0).await;
    let before = get(&app, &format!("/sessions/{id}")).await.json();
    let e = post(&app, &format!("/sessions/{id}/analyze"), json!({})).await.expect(409, "error");
    assert_eq!(e["error"]["status"], 409);
    // Going backwards is illegal too.
    post(&app, &format!("/sessions/{id}/roi"), json!({})).await.expect(409, "error");
    let after = get(&app, &format!("/sessions/{id}")).await.json();
    assert_eq!(before, after);
    assert!(!dir.path().join(&id).join("output").exists());
}

#[tokio::test]
async fn steps_out_of_order_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 0).await;
    for step in ["roi", "segment", "register", "confirm", "analyze"] {
        let body = match step {
            "segment" | "register" => json!({"mode": "auto"}),
            "confirm" => json!({"accepted": true}),
            _ => json!({}),
        };
        post(&app, &format!("/sessions/{id}/{step}"), body).await.expect(409, "error");
    }
    get(&app, &format!("/sessions/{id}/maps/P/0")).await.expect(409, "error");
    assert_eq!(get(&app, &format!("/sessions/{id}")).await.json()["state"], "created");
}

#[tokio::test]
async fn rejecting_the_overlay_fails_the_session_with_suggestions() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = registered_session(&app, 0).await;
    let c = post(&app, &format!("/sessions/{id}/confirm"), json!({"accepted": false}))
        .await
        .expect(200, "confirm");
    assert_eq!(c["state"], "failed");
    assert!(!c["suggestions"].as_array().unwrap().is_empty());
    post(&app, &format!("/sessions/{id}/analyze"), json!({})).await.expect(409, "error");
    let s = get(&app, &format!("/sessions/{id}")).await.expect(200, "session");
    assert_eq!(s["state"], "failed");
    assert_eq!(s["suggestions"], c["suggestions"]);
}

#[tokio::test]
async fn unknown_sessions_and_routes_are_404() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    get(&app, "/sessions/nope").await.expect(404, "error");
    post(&app, "/sessions/nope/roi", json!({})).await.expect(404, "error");
    get(&app, "/no/such/route").await.expect(404, "error");
    get(&app, "/").await.expect(404, "error");
    let (id, _) = analyzed_session(&app, 0, json!({})).await;
    get(&app, &format!("/sessions/{id}/maps/Q/0")).await.expect(404, "error");
    get(&app, &format!("/sessions/{id}/movies/Q")).await.expect(404, "error");
    // Basic display renders only the P movie.
    get(&app, &format!("/sessions/{id}/movies/D")).await.expect(404, "error");
}

#[tokio::test]
async fn invalid_parameters_are_422() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 0).await;
    let a = csv(&tongue_sequence(0, 0.0, 1));
    let bad = [
        format!("/sessions/{id}/upload?which=3&scan=blank&nframe={FRAMES}&nrow={ROWS}&ncol={COLS}"),
        format!("/sessions/{id}/upload?which=1&scan=diagonal&nframe={FRAMES}&nrow={ROWS}&ncol={COLS}"),
        format!("/sessions/{id}/upload?which=1&scan=blank"),
        format!("/sessions/{id}/upload?which=1&scan=blank&nframe={FRAMES}&nrow={}&ncol={COLS}", ROWS + 1),
    ];
    for uri in bad {
        call(&app, Method::POST, &uri, a.clone()).await.expect(422, "error");
    }
    call(&app, Method::POST, &upload_uri(&id, 1), a).await.expect(200, "upload");
    get(&app, &format!("/sessions/{id}/histogram?which=1&nbins=0")).await.expect(422, "error");
    get(&app, &format!("/sessions/{id}/histogram?which=x")).await.expect(422, "error");

    let id = registered_session(&app, 0).await;
    post(&app, &format!("/sessions/{id}/confirm"), json!({"accepted": "yes"})).await.expect(422, "error");
    call(&app, Method::POST, &format!("/sessions/{id}/confirm"), "{not json").await.expect(422, "error");
    post(&app, &format!("/sessions/{id}/confirm"), json!({"accepted": true})).await.expect(200, "confirm");
    post(&app, &format!("/sessions/{id}/analyze"), json!({"alpha": 1.5})).await.expect(422, "error");
    post(&app, &format!("/sessions/{id}/analyze"), json!({"pmap_dim": 4})).await.expect(422, "error");
    post(&app, &format!("/sessions/{id}/analyze"), json!({"sidedness": "less"})).await.expect(422, "error");
    assert_eq!(get(&app, &format!("/sessions/{id}")).await.json()["state"], "confirmed");
    get(&app, &format!("/sessions/{id}/maps/P/zero")).await.expect(422, "error");
}

#[tokio::test]
async fn segmentation_and_registration_parameters_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = registered_session(&app, 0).await;
    // Re-running a step from its own output state is allowed, so go back to
    // segmentation and try bad inputs from there.
    post(&app, &format!("/sessions/{id}/segment"), json!({"mode": "auto", "groups": 9})).await.expect(422, "error");
    post(&app, &format!("/sessions/{id}/segment"), json!({"mode": "magic"})).await.expect(422, "error");
    post(&app, &format!("/sessions/{id}/segment"), json!({"mode": "manual", "c1": 40.0})).await.expect(422, "error");
    let p = json!({"row": 10.0, "col": 4.0});
    post(&app, &format!("/sessions/{id}/register"), json!({"mode": "manual", "points": [p, p, p, p]}))
        .await
        .expect(422, "error");
    post(&app, &format!("/sessions/{id}/register"), json!({"mode": "auto", "polygon": [p, p]}))
        .await
        .expect(422, "error");
    let far = json!({"row": 500.0, "col": 4.0});
    post(&app, &format!("/sessions/{id}/register"), json!({"mode": "auto", "polygon": [p, far, {"row": 1.0, "col": 1.0}]}))
        .await
        .expect(422, "error");
    assert_eq!(get(&app, &format!("/sessions/{id}")).await.json()["state"], "registered");
}

#[tokio::test]
async fn mismatched_uploads_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 0).await;
    call(&app, Method::POST, &upload_uri(&id, 1), csv(&tongue_sequence(0, 0.0, 1))).await.expect(200, "upload");
    let wrong = seqmap_core::ingest::write_sequence(
        &seqmap_core::model::Sequence::new(
            vec![seqmap_core::model::Frame::from_fn(4, 4, |r, c| (r + c) as f64).unwrap(); 3],
            "x",
            "y",
        )
        .unwrap(),
        &seqmap_core::ingest::ScanSpec::blank(3, 4, 4),
    );
    call(&app, Method::POST, &format!("/sessions/{id}/upload?which=2&scan=blank&nframe=3&nrow=4&ncol=4"), wrong)
        .await
        .expect(422, "error");
    assert_eq!(get(&app, &format!("/sessions/{id}")).await.json()["state"], "created");
}

#[tokio::test]
async fn selections_are_echoed_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 3).await;
    call(&app, Method::POST, &upload_uri(&id, 1), csv(&tongue_sequence(3, 0.0, 1))).await.expect(200, "upload");
    call(&app, Method::POST, &upload_uri(&id, 2), csv(&tongue_sequence(0, 4.0, 2))).await.expect(200, "upload");

    let roi1 = json!({"row0": 1, "col0": 2, "height": 18, "width": 24});
    let roi2 = json!({"row0": 0, "col0": 1, "height": 18, "width": 24});
    let r = post(&app, &format!("/sessions/{id}/roi"), json!({"roi1": roi1, "roi2": roi2})).await.expect(200, "roi");
    assert_eq!((&r["roi1"], &r["roi2"]), (&roi1, &roi2));
    assert_eq!((&r["reference1"]["rows"], &r["reference1"]["cols"]), (&json!(18), &json!(24)));

    let seg = json!({"mode": "manual", "c1": 40.25, "c2": 41.5});
    let s = post(&app, &format!("/sessions/{id}/segment"), seg.clone()).await.expect(200, "segment");
    assert_eq!(s["thresholds"], json!([40.25, 41.5]));
    assert_eq!(s["fitted_groups"], Value::Null);

    let points = json!([
        {"row": 9.0, "col": 3.0}, {"row": 9.0, "col": 20.0},
        {"row": 9.5, "col": 3.0}, {"row": 10.0, "col": 20.0}
    ]);
    let polygon = json!([{"row": 1.0, "col": 1.0}, {"row": 1.0, "col": 22.0}, {"row": 17.0, "col": 22.0}, {"row": 17.0, "col": 1.0}]);
    let reg = json!({"mode": "manual", "points": points, "polygon": polygon});
    let g = post(&app, &format!("/sessions/{id}/register"), reg.clone()).await.expect(200, "register");
    assert_eq!((&g["points"], &g["polygon"]), (&points, &polygon));

    let s = get(&app, &format!("/sessions/{id}")).await.expect(200, "session");
    let sel = &s["selections"];
    assert_eq!((&sel["roi1"], &sel["roi2"], &sel["segment"], &sel["register"]), (&roi1, &roi2, &seg, &reg));
    assert_eq!(s["thresholds"], json!([40.25, 41.5]));
    assert_eq!(s["registration"]["pair_count"], g["pair_count"]);
}

async fn replay(seed: u64) -> Vec<Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (id, m) = analyzed_session(&app, seed, json!({"display": "all"})).await;
    let pairs = m["parameters"]["pairs"].as_array().unwrap().len();
    let mut out = Vec::new();
    for kind in ["D", "S", "T", "P"] {
        for k in 0..pairs {
            out.push(get(&app, &format!("/sessions/{id}/maps/{kind}/{k}")).await.bytes);
        }
    }
    out
}

#[tokio::test]
async fn replaying_a_session_gives_identical_payloads() {
    let a = replay(11).await;
    let b = replay(11).await;
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[tokio::test]
async fn concurrent_sessions_are_independent() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (a, b) = tokio::join!(
        analyzed_session(&app, 1, json!({})),
        analyzed_session(&app, 2, json!({"alpha": 0.2}))
    );
    assert_ne!(a.0, b.0);
    assert_eq!(a.1["parameters"]["alpha"], 0.05);
    assert_eq!(b.1["parameters"]["alpha"], 0.2);
    assert_eq!(get(&app, "/health").await.json()["sessions"], 2);
}

#[tokio::test]
async fn analysed_sessions_are_restored_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let app = seqmap_server::router(AppState::new(config(dir.path(), true)));
    let (id, m) = analyzed_session(&app, 5, json!({"display": "all"})).await;
    let p0 = get(&app, &format!("/sessions/{id}/maps/P/0")).await.json();
    let pending = registered_session(&app, 5).await;

    let restored = seqmap_server::router(AppState::new(config(dir.path(), true)));
    let s = get(&restored, &format!("/sessions/{id}")).await.expect(200, "session");
    assert_eq!((s["state"].as_str(), s["read_only"].as_bool()), (Some("analyzed"), Some(true)));
    assert_eq!(s["manifest"], m);
    get(&restored, &format!("/sessions/{pending}")).await.expect(404, "error");

    let back = get(&restored, &format!("/sessions/{id}/maps/P/0")).await.expect(200, "map");
    assert_eq!(back, p0);
    get(&restored, &format!("/sessions/{id}/heightfield/0")).await.expect(200, "heightfield");
    assert_eq!(get(&restored, &format!("/sessions/{id}/movies/T")).await.status, 200);
    assert_eq!(get(&restored, &format!("/sessions/{id}/overlay")).await.status, 200);
    // Original and registered frames are not persisted as maps.
    get(&restored, &format!("/sessions/{id}/maps/O1/0")).await.expect(404, "error");
    post(&restored, &format!("/sessions/{id}/analyze"), json!({})).await.expect(409, "error");
}
