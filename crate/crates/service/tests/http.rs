use std::time::Duration;

use axum::body::Body;
use axum::http::{Method as HttpMethod, Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use selseg_core::image::{decode_image, encode_image_pgm};
use selseg_core::metrics::dice;
use selseg_core::nets::{train, Method};
use selseg_core::pipeline::{segment_image, MethodConfig, SegMethod};
use selseg_core::synth::{generate, Fixture, FixtureKind};
use selseg_core::{Error, FieldKind, Image, MarkerSet, ScalarField};
use selseg_service::{rle, router, ApiError, AppState, ServiceConfig, SegmentResponse, SessionCreated};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(cfg: ServiceConfig) -> Router {
    router(AppState::new(cfg))
}

async fn call(app: &Router, method: HttpMethod, uri: &str, body: impl Into<Body>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(body.into()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn create(app: &Router, img: &Image) -> String {
    let (status, body) = call(app, HttpMethod::POST, "/sessions", encode_image_pgm(img)).await;
    assert_eq!(status, StatusCode::CREATED);
    let created: SessionCreated = serde_json::from_slice(&body).unwrap();
    assert_eq!((created.height, created.width), img.dims());
    created.session_id
}

async fn put_markers(app: &Router, id: &str, points: Value) -> StatusCode {
    call(app, HttpMethod::PUT, &format!("/sessions/{id}/markers"), points.to_string()).await.0
}

async fn segment(app: &Router, id: &str, request: Value) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(HttpMethod::POST)
        .uri(format!("/sessions/{id}/segment"))
        .header("content-type", "application/json")
        .body(Body::from(request.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn segment_ok(app: &Router, id: &str, request: Value) -> SegmentResponse {
    let (status, body) = segment(app, id, request).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

fn markers_json(m: &MarkerSet) -> Value {
    serde_json::from_str(&m.to_json()).unwrap()
}

fn decoded_mask(resp: &SegmentResponse) -> ScalarField {
    let bits = rle::decode(&resp.mask, resp.height * resp.width).unwrap();
    let data = bits.iter().map(|b| *b as u8 as f64).collect();
    ScalarField::new(resp.height, resp.width, data, FieldKind::Mask).unwrap()
}

/// The fixture image after the 8-bit round trip the HTTP upload imposes.
fn uploaded(fx: &Fixture) -> Image {
    decode_image(&encode_image_pgm(&fx.image)).unwrap()
}

fn error_text(body: &[u8]) -> String {
    let v: Value = serde_json::from_slice(body).unwrap();
    v["error"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn upload_accepts_pgm_and_rejects_bad_or_large_images() {
    let app = app(ServiceConfig::default());
    let img = Image::from_fn(64, 64, |r, c| ((r + c) % 7) as f64 / 7.0).unwrap();
    create(&app, &img).await;

    let bytes = encode_image_pgm(&img);
    let (status, body) = call(&app, HttpMethod::POST, "/sessions", bytes[..bytes.len() - 10].to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(error_text(&body).contains("truncated"));
    assert_eq!(call(&app, HttpMethod::POST, "/sessions", "hello").await.0, StatusCode::BAD_REQUEST);

    let big = Image::from_fn(1024, 1024, |_, _| 0.5).unwrap();
    assert_eq!(call(&app, HttpMethod::POST, "/sessions", encode_image_pgm(&big)).await.0, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn markers_are_validated_and_echoed() {
    let app = app(ServiceConfig::default());
    let id = create(&app, &Image::from_fn(32, 32, |_, _| 0.5).unwrap()).await;
    let uri = format!("/sessions/{id}/markers");

    let (status, body) = call(&app, HttpMethod::GET, &uri, Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!([]));

    let square = json!([[10, 10], [10, 20], [20, 20], [20, 10]]);
    assert_eq!(put_markers(&app, &id, square.clone()).await, StatusCode::NO_CONTENT);
    let (status, body) = call(&app, HttpMethod::GET, &uri, Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), square);

    for bad in [
        json!([[1, 1], [5, 5]]),
        json!([[1, 1], [5, 5], [40, 3]]),
        json!([[1, 1], [2, 2], [3, 3]]),
        json!({"points": []}),
    ] {
        assert_eq!(put_markers(&app, &id, bad.clone()).await, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
    }
    // a rejected update leaves the previous markers in place
    let (_, body) = call(&app, HttpMethod::GET, &uri, Body::empty()).await;
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), square);

    let ghost = "00000000-0000-4000-8000-000000000000";
    assert_eq!(put_markers(&app, ghost, square.clone()).await, StatusCode::NOT_FOUND);
    assert_eq!(put_markers(&app, "not-a-uuid", square).await, StatusCode::NOT_FOUND);
    assert_eq!(segment(&app, ghost, json!({"method": "tv"})).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn segment_request_errors() {
    let app = app(ServiceConfig::default());
    let fx = generate(FixtureKind::Disc, 32, 0.1, 0).unwrap();
    let id = create(&app, &fx.image).await;

    let (status, body) = segment(&app, &id, json!({"method": "tv"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(error_text(&body).contains("markers"));

    assert_eq!(put_markers(&app, &id, markers_json(&fx.markers)).await, StatusCode::NO_CONTENT);
    let (status, body) = segment(&app, &id, json!({"method": "m9"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(error_text(&body).contains("m9"));
    let (status, body) = segment(&app, &id, json!({"method": "m3"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(error_text(&body).contains("weights"));
    let (status, body) = segment(&app, &id, json!({"method": "tv", "params": {"momentum": 1}})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(error_text(&body).contains("momentum"));
    assert_eq!(segment(&app, &id, json!({"method": "tv", "params": {"rho": -1.0}})).await.0, StatusCode::BAD_REQUEST);
}

#[test]
fn numerical_failures_map_to_500() {
    let e = ApiError::from(Error::NonFinite("u".into()));
    assert_eq!(e.status, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(ApiError::from(Error::DegeneratePolygon).status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn tv_on_disc_fixture_round_trips_the_mask() {
    let app = app(ServiceConfig::default());
    let fx = generate(FixtureKind::Disc, 64, 0.1, 3).unwrap();
    let id = create(&app, &fx.image).await;
    assert_eq!(put_markers(&app, &id, markers_json(&fx.markers)).await, StatusCode::NO_CONTENT);
    let resp = segment_ok(&app, &id, json!({"method": "tv"})).await;

    let mask = decoded_mask(&resp);
    let d = dice(&mask, &fx.truth).unwrap();
    assert!(d >= 0.99, "dice {d}");
    let local = segment_image(&uploaded(&fx), &fx.markers, SegMethod::Tv, &MethodConfig::default(), None).unwrap();
    assert_eq!(mask, local.mask);
    assert_eq!(resp.population, local.mask.count_nonzero());
    assert_eq!((resp.marker_version, resp.fields_version), (1, 1));

    let pgm = base64::engine::general_purpose::STANDARD.decode(&resp.u).unwrap();
    let u = decode_image(&pgm).unwrap();
    assert_eq!(u.dims(), (64, 64));
    for (a, b) in u.data().iter().zip(local.u.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

#[tokio::test]
async fn marker_updates_invalidate_cached_fields() {
    let app = app(ServiceConfig::default());
    let fx = generate(FixtureKind::TwoObject, 32, 0.1, 4).unwrap();
    let image = uploaded(&fx);
    let id = create(&app, &fx.image).await;
    let cfg = MethodConfig::default();

    assert_eq!(put_markers(&app, &id, markers_json(&fx.markers)).await, StatusCode::NO_CONTENT);
    let first = segment_ok(&app, &id, json!({"method": "tv"})).await;
    assert_eq!((first.marker_version, first.fields_version), (1, 1));
    assert!(first.timings.fields_ms > 0.0);

    let again = segment_ok(&app, &id, json!({"method": "tv"})).await;
    assert_eq!(again.fields_version, 1);
    assert_eq!(again.timings.fields_ms, 0.0, "second run should reuse the fields");
    assert_eq!(again.mask, first.mask);

    // move the polygon onto the distractor side of the image
    let (h, w) = image.dims();
    let c = fx.markers.points().iter().map(|p| p.1).sum::<usize>() / fx.markers.len();
    let mirrored: Vec<(usize, usize)> = fx.markers.points().iter().map(|&(r, col)| (r, w - 1 - col)).collect();
    let moved = MarkerSet::new(mirrored, h, w).unwrap();
    assert_ne!(c, w - 1 - c);
    assert_eq!(put_markers(&app, &id, markers_json(&moved)).await, StatusCode::NO_CONTENT);
    let second = segment_ok(&app, &id, json!({"method": "tv"})).await;
    assert_eq!((second.marker_version, second.fields_version), (2, 2));
    assert!(second.timings.fields_ms > 0.0);
    let expected = segment_image(&image, &moved, SegMethod::Tv, &cfg, None).unwrap();
    assert_eq!(decoded_mask(&second), expected.mask);
    assert_ne!(second.mask, first.mask);

    // changing a data-term parameter rebuilds too
    let third = segment_ok(&app, &id, json!({"method": "tv", "params": {"eikonal_beta": 10.0}})).await;
    assert!(third.timings.fields_ms > 0.0);
    let expected = segment_image(&image, &moved, SegMethod::Tv, &MethodConfig { eikonal_beta: 10.0, ..cfg }, None).unwrap();
    assert_eq!(decoded_mask(&third), expected.mask);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_sessions_do_not_share_state() {
    let app = app(ServiceConfig::default());
    let a = generate(FixtureKind::Disc, 32, 0.1, 10).unwrap();
    let b = generate(FixtureKind::TwoObject, 32, 0.1, 11).unwrap();
    let (ia, ib) = (create(&app, &a.image).await, create(&app, &b.image).await);
    put_markers(&app, &ia, markers_json(&a.markers)).await;
    put_markers(&app, &ib, markers_json(&b.markers)).await;

    let (ra, rb) = tokio::join!(
        segment_ok(&app, &ia, json!({"method": "elastica"})),
        segment_ok(&app, &ib, json!({"method": "tv", "params": {"mu": 0.5}})),
    );
    let cfg = MethodConfig::default();
    let ea = segment_image(&uploaded(&a), &a.markers, SegMethod::Elastica, &cfg, None).unwrap();
    let eb = segment_image(&uploaded(&b), &b.markers, SegMethod::Tv, &MethodConfig { mu: 0.5, ..cfg }, None).unwrap();
    assert_eq!(decoded_mask(&ra), ea.mask);
    assert_eq!(decoded_mask(&rb), eb.mask);
    assert_eq!((ra.method.as_str(), rb.method.as_str()), ("elastica", "tv"));
}

#[tokio::test]
async fn least_recently_used_session_is_evicted() {
    let app = app(ServiceConfig { max_sessions: 2, ..Default::default() });
    let img = Image::from_fn(16, 16, |_, _| 0.5).unwrap();
    let first = create(&app, &img).await;
    let second = create(&app, &img).await;
    let square = json!([[2, 2], [2, 8], [8, 8], [8, 2]]);
    // touching the first session makes the second the eviction candidate
    assert_eq!(put_markers(&app, &first, square.clone()).await, StatusCode::NO_CONTENT);
    create(&app, &img).await;
    assert_eq!(put_markers(&app, &first, square.clone()).await, StatusCode::NO_CONTENT);
    assert_eq!(put_markers(&app, &second, square).await, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn exceeding_the_time_budget_is_reported() {
    let app = app(ServiceConfig { time_budget: Duration::ZERO, ..Default::default() });
    let fx = generate(FixtureKind::Disc, 16, 0.1, 0).unwrap();
    let id = create(&app, &fx.image).await;
    put_markers(&app, &id, markers_json(&fx.markers)).await;
    let (status, body) = segment(&app, &id, json!({"method": "dip", "params": {"dip_epochs": 20}})).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(error_text(&body).contains("budget"));
}

#[tokio::test]
async fn network_methods_use_configured_weights() {
    let fx = generate(FixtureKind::Disc, 16, 0.1, 1).unwrap();
    let tc = MethodConfig { epochs: 0, seed: 5, ..Default::default() }.train();
    let ck = train(&[(fx.image.clone(), fx.markers.clone())], Method::M4, &tc).unwrap().checkpoint().unwrap();
    let app = app(ServiceConfig::default().with_weights(ck.clone()));
    let id = create(&app, &fx.image).await;
    put_markers(&app, &id, markers_json(&fx.markers)).await;

    let resp = segment_ok(&app, &id, json!({"method": "m4"})).await;
    let local = segment_image(&uploaded(&fx), &fx.markers, SegMethod::Net(Method::M4), &MethodConfig::default(), Some(&ck)).unwrap();
    assert_eq!(decoded_mask(&resp), local.mask);
    assert_eq!(segment(&app, &id, json!({"method": "m3"})).await.0, StatusCode::BAD_REQUEST);
}
