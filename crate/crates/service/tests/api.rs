use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use mclr::model::MotionModel;
use mclr_service::{
    router, AppState, AttentionResponse, CountResponse, EditResponse, GenerateResponse, HealthResponse,
};
use serde_json::{json, Value};
use tower::ServiceExt;

const FRAMES: usize = 48;

fn state() -> Arc<AppState> {
    static STATE: OnceLock<Arc<AppState>> = OnceLock::new();
    STATE
        .get_or_init(|| Arc::new(AppState::new(MotionModel::untrained(FRAMES, 3), "test-hash")))
        .clone()
}

fn app() -> Router {
    router(state(), None)
}

async fn send(app: Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, bytes.to_vec())
}

async fn post(path: &str, body: Value) -> (StatusCode, Vec<u8>) {
    post_raw(path, body.to_string()).await
}

async fn post_raw(path: &str, body: String) -> (StatusCode, Vec<u8>) {
    let req = Request::post(path)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    send(app(), req).await
}

async fn get(path: &str) -> (StatusCode, Vec<u8>) {
    send(app(), Request::get(path).body(Body::empty()).unwrap()).await
}

fn parse<T: serde::de::DeserializeOwned>(status: StatusCode, bytes: &[u8]) -> T {
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(bytes));
    serde_json::from_slice(bytes).unwrap()
}

async fn generate(prompt: &str, seed: u64) -> GenerateResponse {
    let (s, b) = post(
        "/api/v1/generate",
        json!({"prompt": prompt, "seed": seed, "frames": FRAMES}),
    )
    .await;
    parse(s, &b)
}

#[tokio::test]
async fn health_reports_checkpoint() {
    for path in ["/api/v1/health", "/api/health"] {
        let (s, b) = get(path).await;
        let h: HealthResponse = parse(s, &b);
        assert_eq!(h.status, "ok");
        assert_eq!(h.checkpoint_hash, "test-hash");
        assert_eq!(h.attention_layers, 12);
    }
}

#[tokio::test]
async fn identical_generates_are_identical() {
    let body = json!({"prompt": "a man jumps.", "seed": 5, "frames": FRAMES, "cfg_weight": 2.5});
    let (s1, b1) = post("/api/v1/generate", body.clone()).await;
    let (s2, b2) = post("/api/generate", body).await;
    assert_eq!(s1, StatusCode::OK);
    assert_eq!(s2, StatusCode::OK);
    assert_eq!(b1, b2);
    let g: GenerateResponse = serde_json::from_slice(&b1).unwrap();
    assert_eq!(g.motion.frames, FRAMES);
    assert_eq!(g.motion.positions.len(), FRAMES);
    assert_eq!(g.word_tokens[0], "<bos>");
}

#[tokio::test]
async fn noop_edit_reproduces_reference() {
    let g = generate("a man jumps twice.", 7).await;
    let (s, b) = post(
        "/api/v1/edit",
        json!({"base_id": g.id, "directive": {"op": "emphasize", "word_index": 2, "weight": 0.0}}),
    )
    .await;
    let e: EditResponse = parse(s, &b);
    assert_eq!(e.edited_motion, e.reference_motion);
    assert_eq!(e.reference_motion, g.motion);
    assert_eq!(e.reference_id, g.id);
    assert!(e.diff_summary.is_zero());
}

#[tokio::test]
async fn edit_from_inline_base() {
    let (s, b) = post(
        "/api/edit",
        json!({
            "base": {"prompt": "a man jumps.", "seed": 2, "frames": FRAMES},
            "directive": {"op": "emphasize", "word_index": 2, "weight": 0.5}
        }),
    )
    .await;
    let e: EditResponse = parse(s, &b);
    assert_ne!(e.edited_motion, e.reference_motion);
    let delta = e.diff_summary.column_mass_deltas[3];
    assert!(delta > 0.0, "{delta}");
    // The edited run is a session of its own.
    let (s, _) = get(&format!("/api/v1/attention/{}?kind=cross&layer=2&step=1", e.id)).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn cross_map_has_one_column_per_token() {
    let g = generate("a man jumps.", 1).await;
    assert_eq!(g.word_tokens.len(), 4);
    let (s, b) = get(&format!("/api/v1/attention/{}?kind=cross&layer=4&step=10&head=3", g.id)).await;
    let a: AttentionResponse = parse(s, &b);
    assert_eq!(a.dims[1], 4);
    assert_eq!(a.values.len(), a.dims[0] * a.dims[1]);
    assert_eq!(a.words.as_deref(), Some(&g.word_tokens[..]));
    assert!(!a.pooled);
    for row in a.values.chunks(4) {
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
    let (s, b) = get(&format!("/api/attention/{}?kind=self&layer=5&step=3&raw=1", g.id)).await;
    let a: AttentionResponse = parse(s, &b);
    assert_eq!(a.dims, [FRAMES / 2, FRAMES / 2]);
    assert!(a.words.is_none());
}

#[tokio::test]
async fn count_from_payload_and_session() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let map = mclr::counting::synthetic_repetition_map(&mut rng, 3, 4);
    let (r, c) = map.dim();
    let (s, b) = post(
        "/api/v1/count",
        json!({"attention": {"dims": [r, c], "values": map.iter().collect::<Vec<_>>()}}),
    )
    .await;
    let out: CountResponse = parse(s, &b);
    assert_eq!(out.count, 3.0);
    assert_eq!(out.config.sigma, 0.8);

    let g = generate("a man jumps.", 4).await;
    let (s, b) = post("/api/count", json!({"id": g.id, "config": {"sigma": 1.0}})).await;
    let out: CountResponse = parse(s, &b);
    assert_eq!(out.per_row_peaks.len(), FRAMES / 4);
    assert!(out.count.is_finite());
    assert_eq!(out.config.sigma, 1.0);
    assert_eq!(out.config.downsample_factor, 4);
}

#[tokio::test]
async fn schema_violations_are_bad_requests() {
    let cases = [
        ("/api/v1/generate", "{not json".to_string()),
        (
            "/api/v1/generate",
            json!({"prompt": "a man jumps.", "bogus": 1}).to_string(),
        ),
        ("/api/v1/generate", json!({"seed": 1}).to_string()),
        (
            "/api/v1/edit",
            json!({"directive": {"op": "emphasize", "word_index": 0, "weight": 0.1}}).to_string(),
        ),
        (
            "/api/v1/edit",
            json!({"base": {"prompt": "a man jumps."}, "directive": {"op": "teleport"}}).to_string(),
        ),
        ("/api/v1/count", json!({}).to_string()),
        (
            "/api/v1/count",
            json!({"attention": {"dims": [2, 2], "values": [1.0]}}).to_string(),
        ),
    ];
    for (path, body) in cases {
        let (s, b) = post_raw(path, body.clone()).await;
        assert_eq!(
            s,
            StatusCode::BAD_REQUEST,
            "{path} {body}: {}",
            String::from_utf8_lossy(&b)
        );
        let v: Value = serde_json::from_slice(&b).unwrap();
        assert_eq!(v["error"], "bad_request");
    }
    let g = generate("a man walks.", 0).await;
    let (s, _) = get(&format!("/api/v1/attention/{}?kind=diagonal&layer=1&step=1", g.id)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = get(&format!("/api/v1/attention/{}?layer=1&step=1", g.id)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let (s, _) = get("/api/v1/attention/deadbeef?kind=self&layer=1&step=1").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post(
        "/api/v1/edit",
        json!({"base_id": "deadbeef", "directive": {"op": "erase", "word_index": 0}}),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post("/api/v1/count", json!({"id": "deadbeef"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn out_of_range_is_unprocessable() {
    let base = json!({"prompt": "a man jumps.", "seed": 0, "frames": FRAMES});
    for directive in [
        json!({"op": "emphasize", "word_index": 2, "weight": 1.5}),
        json!({"op": "emphasize", "word_index": 9, "weight": 0.5}),
        json!({"op": "shift", "ratio": 2.0}),
        json!({"op": "replace", "edited_prompt": "a man walks.", "steps_end": 11}),
    ] {
        let (s, b) = post("/api/v1/edit", json!({"base": base, "directive": directive})).await;
        assert_eq!(
            s,
            StatusCode::UNPROCESSABLE_ENTITY,
            "{directive}: {}",
            String::from_utf8_lossy(&b)
        );
    }
    let g = generate("a man jumps.", 0).await;
    let (s, _) = get(&format!("/api/v1/attention/{}?kind=self&layer=2&step=1", g.id)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = get(&format!("/api/v1/attention/{}?kind=cross&layer=2&step=11", g.id)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn cors_allows_cross_origin_requests() {
    let req = Request::get("/api/v1/health")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}

#[tokio::test]
async fn static_bundle_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    let app = router(state(), Some(dir.path().to_path_buf()));
    let (s, b) = send(app.clone(), Request::get("/index.html").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b, b"<html>ui</html>");
    let (s, _) = send(app, Request::get("/api/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
}
