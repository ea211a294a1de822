use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;
use vqnerf_core::edit::{EditSession, RenderMode};
use vqnerf_core::field::FieldConfig;
use vqnerf_core::model::{CoordNorm, Model, ModelInit};
use vqnerf_core::scene::{generate_scene, EnvPreset, SceneSpec};
use vqnerf_service::{router, AppState};

fn session() -> EditSession {
    let mut spec = SceneSpec::balls3();
    spec.cameras.views = 2;
    spec.cameras.width = 20;
    spec.cameras.image_height = 20;
    spec.env_rows = 4;
    spec.env_cols = 8;
    let bundle = generate_scene(&spec).unwrap();
    let init = ModelInit {
        field: FieldConfig {
            enc_width: 16,
            latent_dim: 8,
            dec_width: 8,
            ..FieldConfig::default()
        },
        m0: 4,
        ema_decay: 0.99,
        ema_smoothing: 1e-5,
        env_rows: 4,
        env_cols: 8,
        env_radiance: 0.5,
        seed: 5,
    };
    let model = Model::init(&init, CoordNorm::from_bundle(&bundle).unwrap()).unwrap();
    EditSession::new(Arc::new(model), Arc::new(bundle), 3).unwrap()
}

fn app() -> Router {
    router(AppState::open(session(), None).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, serde_json::Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn floats(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Pixel index of the first foreground pixel of view 0 and its material.
fn foreground_pixel(s: &EditSession) -> (usize, usize, usize) {
    let seg = s.segmentation(0).unwrap();
    let i = seg.labels.iter().position(|&l| l != vqnerf_core::vq::BACKGROUND).unwrap();
    (i % seg.width, i / seg.width, seg.labels[i] as usize)
}

#[tokio::test]
async fn views_and_materials() {
    let app = app();
    let (s, v) = json(&app, "GET", "/api/views", "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["m"], 3);
    assert_eq!(v["views"].as_array().unwrap().len(), 2);
    assert_eq!(v["views"][1]["width"], 20);
    let (s, m) = json(&app, "GET", "/api/materials", "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(m.as_array().unwrap().len(), 3);
    assert_eq!(m[0]["overridden"], false);
}

#[tokio::test]
async fn select_reports_material_or_background() {
    let app = app();
    let (x, y, u) = foreground_pixel(&session());
    let (s, v) = json(&app, "POST", "/api/select", &format!(r#"{{"view":0,"x":{x},"y":{y}}}"#)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["index"], u);
    // Corners of every generated view see the background.
    let (s, v) = json(&app, "POST", "/api/select", r#"{"view":0,"x":0,"y":0}"#).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "no_material");
    let (s, v) = json(&app, "POST", "/api/select", r#"{"view":0,"x":20,"y":0}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "out_of_bounds");
    let (s, v) = json(&app, "POST", "/api/select", r#"{"view":7,"x":0,"y":0}"#).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_view");
}

#[tokio::test]
async fn malformed_requests() {
    let app = app();
    let (s, v) = json(&app, "POST", "/api/edit", "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "invalid_json");
    let (s, v) = json(&app, "POST", "/api/edit", r#"{"index":9,"k_d":[0.5,0.5,0.5],"k_m":0,"k_r":0.5}"#).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "unknown_material");
    let (s, v) = json(&app, "POST", "/api/edit", r#"{"index":0,"k_d":[1.5,0.5,0.5],"k_m":0,"k_r":0.5}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "invalid_request");
    let (s, v) = json(&app, "GET", "/api/render?view=0&branch=sideways", "").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "invalid_request");
    let (s, v) = json(&app, "GET", "/api/render?view=0&format=jpeg", "").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "invalid_request");
    let (s, v) = json(&app, "POST", "/api/relight", r#"{"preset":"noon"}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "invalid_request");
    let (s, _) = call(&app, "GET", "/api/nothing", "").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn edit_changes_only_the_material_region() {
    let app = app();
    let reference = session();
    let (_, _, u) = foreground_pixel(&reference);
    let before = reference.render(0, RenderMode::Edited).unwrap();
    let body = format!(r#"{{"index":{u},"k_d":[0.9,0.1,0.1],"k_m":0.9,"k_r":0.2}}"#);
    let (s, m) = json(&app, "POST", "/api/edit", &body).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(m[u]["overridden"], true);

    let req = Request::get("/api/render?view=0&format=raw").body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["x-width"], "20");
    assert_eq!(resp.headers()["x-height"], "20");
    let after = floats(&resp.into_body().collect().await.unwrap().to_bytes());
    let seg = reference.segmentation(0).unwrap();
    let mut changed = 0;
    for p in 0..seg.labels.len() {
        let same = (0..3).all(|c| after[3 * p + c] == before[3 * p + c]);
        if seg.labels[p] as usize != u {
            assert!(same, "pixel {p} outside the edited material changed");
        } else if !same {
            changed += 1;
        }
    }
    assert!(changed > 0);

    let (s, _) = json(&app, "POST", "/api/reset", "").await;
    assert_eq!(s, StatusCode::OK);
    let (_, raw) = call(&app, "GET", "/api/render?view=0&format=raw", "").await;
    assert_eq!(floats(&raw), before);
}

#[tokio::test]
async fn png_endpoints() {
    let app = app();
    for uri in ["/api/render?view=1", "/api/render?view=1&branch=discrete", "/api/segmentation?view=1"] {
        let (s, b) = call(&app, "GET", uri, "").await;
        assert_eq!(s, StatusCode::OK, "{uri}");
        assert_eq!(&b[..8], b"\x89PNG\r\n\x1a\n", "{uri}");
    }
}

#[tokio::test]
async fn relight_preset_and_upload_agree() {
    let app = app();
    let (s, _) = json(&app, "POST", "/api/relight", r#"{"preset":"dusk","intensity":2}"#).await;
    assert_eq!(s, StatusCode::OK);
    let (_, preset) = call(&app, "GET", "/api/render?view=0&format=raw", "").await;

    let app2 = app_uploaded(EnvPreset::Dusk.build(4, 8).unwrap().to_bytes()).await;
    let (_, upload) = call(&app2, "GET", "/api/render?view=0&format=raw", "").await;
    assert_eq!(floats(&preset), floats(&upload));

    let mut expect = session();
    let env = expect.lighting(&vqnerf_core::edit::Lighting::Preset { name: "dusk".into() }, 2.0).unwrap();
    expect.relight(env);
    assert_eq!(floats(&preset), expect.render(0, RenderMode::Edited).unwrap());
}

async fn app_uploaded(env: Vec<u8>) -> Router {
    let app = app();
    let boundary = "XBOUNDARYX";
    let mut body = Vec::new();
    body.extend_from_slice(
        format!("--{boundary}\r\nContent-Disposition: form-data; name=\"env\"; filename=\"e.envm\"\r\nContent-Type: application/octet-stream\r\n\r\n").as_bytes(),
    );
    body.extend_from_slice(&env);
    body.extend_from_slice(format!("\r\n--{boundary}\r\nContent-Disposition: form-data; name=\"intensity\"\r\n\r\n2\r\n--{boundary}--\r\n").as_bytes());
    let req = Request::post("/api/relight")
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    app
}

#[tokio::test]
async fn journal_replays_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("edits.jsonl");
    let (_, _, u) = foreground_pixel(&session());
    let first = {
        let app = router(AppState::open(session(), Some(&path)).unwrap());
        let body = format!(r#"{{"index":{u},"k_d":[0.2,0.7,0.3],"k_m":0.1,"k_r":0.6}}"#);
        assert_eq!(json(&app, "POST", "/api/edit", &body).await.0, StatusCode::OK);
        assert_eq!(json(&app, "POST", "/api/relight", r#"{"preset":"uniform"}"#).await.0, StatusCode::OK);
        // Rejected ops are not journaled.
        assert_eq!(json(&app, "POST", "/api/edit", r#"{"index":99,"k_d":[0,0,0],"k_m":0,"k_r":0}"#).await.0, StatusCode::UNPROCESSABLE_ENTITY);
        call(&app, "GET", "/api/render?view=1&format=raw", "").await.1
    };
    let lines = std::fs::read_to_string(&path).unwrap().lines().count();
    assert_eq!(lines, 3);
    let app = router(AppState::open(session(), Some(&path)).unwrap());
    let (_, second) = call(&app, "GET", "/api/render?view=1&format=raw", "").await;
    assert_eq!(first, second);
    let (_, m) = json(&app, "GET", "/api/materials", "").await;
    assert_eq!(m[u]["overridden"], true);
}

#[tokio::test]
async fn journal_from_another_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("edits.jsonl");
    AppState::open(session(), Some(&path)).unwrap();
    let s = session();
    let other = EditSession::new(Arc::new(s.model().clone()), Arc::new(s.bundle().clone()), 2).unwrap();
    assert!(matches!(
        AppState::open(other, Some(&path)),
        Err(vqnerf_service::JournalError::Mismatch { .. })
    ));
}

#[tokio::test]
async fn bind_fails_on_used_port() {
    let held = vqnerf_service::bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let addr = held.local_addr().unwrap();
    assert!(vqnerf_service::bind(addr).await.is_err());
    assert!(vqnerf_service::serve(AppState::open(session(), None).unwrap(), addr).await.is_err());
}
