//! HTTP front end for interactive segmentation.
//!
//! A client uploads an image, places marker points, and asks for a
//! segmentation. Sessions live in memory behind an LRU map; each one caches
//! its data terms for the marker version they were built from.

pub mod rle;

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex as SyncMutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use lru::LruCache;
use selseg_core::fidelity::{FidelityBundle, FidelityConfig};
use selseg_core::image::{decode_image, encode_pgm, rasterize_polygon};
use selseg_core::nets::{Checkpoint, Method};
use selseg_core::pipeline::{segment, MethodConfig, SegMethod};
use selseg_core::{Error, Image, MarkerSet};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use uuid::Uuid;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Largest accepted image side.
    pub max_dim: usize,
    pub max_sessions: usize,
    /// Per-request budget for a segmentation.
    pub time_budget: Duration,
    /// Trained networks, one per method.
    pub weights: HashMap<Method, Arc<Checkpoint>>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_dim: 512,
            max_sessions: 32,
            time_budget: Duration::from_secs(30),
            weights: HashMap::new(),
        }
    }
}

impl ServiceConfig {
    /// Registers `ck` under the method it was trained for, replacing any
    /// earlier checkpoint of that method.
    pub fn with_weights(mut self, ck: Checkpoint) -> Self {
        self.weights.insert(ck.method, Arc::new(ck));
        self
    }
}

struct CachedFields {
    marker_version: u64,
    fidelity: FidelityConfig,
    bundle: Arc<FidelityBundle>,
}

struct Session {
    image: Arc<Image>,
    markers: Option<MarkerSet>,
    /// Bumped on every marker update.
    marker_version: u64,
    cache: Option<CachedFields>,
}

pub struct AppState {
    cfg: ServiceConfig,
    sessions: SyncMutex<LruCache<Uuid, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        let cap = NonZeroUsize::new(cfg.max_sessions.max(1)).expect("positive");
        Arc::new(Self {
            cfg,
            sessions: SyncMutex::new(LruCache::new(cap)),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}"));
        let key = Uuid::parse_str(id).map_err(|_| not_found())?;
        self.sessions.lock().expect("session map").get(&key).cloned().ok_or_else(not_found)
    }
}

/// JSON error body `{"error": message}` with a status code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::NonFinite(_) => StatusCode::INTERNAL_SERVER_ERROR,
            Error::InvalidMarkers(_) | Error::DegeneratePolygon | Error::EmptyRegion(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionCreated {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub method: String,
    /// Any subset of the method configuration keys.
    #[serde(default)]
    pub params: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Timings {
    /// Time spent building the data terms; zero on a cache hit.
    pub fields_ms: f64,
    pub solve_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SegmentResponse {
    pub method: String,
    pub height: usize,
    pub width: usize,
    /// `[start, length]` runs of foreground pixels in row-major order.
    pub mask: Vec<rle::Run>,
    /// Number of foreground pixels.
    pub population: usize,
    /// The relaxed label as a base64 binary PGM.
    pub u: String,
    pub timings: Timings,
    /// Marker version at the time of the request.
    pub marker_version: u64,
    /// Marker version the data terms were built from.
    pub fields_version: u64,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/markers", get(get_markers).put(put_markers))
        .route("/sessions/{id}/segment", post(run_segment))
        .layer(DefaultBodyLimit::max(32 << 20))
        .with_state(state)
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let image = decode_image(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let (height, width) = image.dims();
    let max = state.cfg.max_dim;
    if height > max || width > max {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image is {height}x{width}; the limit is {max}x{max}"),
        ));
    }
    let id = Uuid::new_v4();
    let session = Session {
        image: Arc::new(image),
        markers: None,
        marker_version: 0,
        cache: None,
    };
    state.sessions.lock().expect("session map").put(id, Arc::new(Mutex::new(session)));
    let body = SessionCreated { session_id: id.to_string(), height, width };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn put_markers(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    let (h, w) = s.image.dims();
    let text = std::str::from_utf8(&body)
        .map_err(|_| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "marker body is not UTF-8"))?;
    let markers = MarkerSet::from_json(text, h, w)?;
    rasterize_polygon(&markers, h, w)?;
    s.markers = Some(markers);
    s.marker_version += 1;
    s.cache = None;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_markers(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let s = session.lock().await;
    let points: Vec<(usize, usize)> = s.markers.as_ref().map(|m| m.points().to_vec()).unwrap_or_default();
    Ok(Json(points).into_response())
}

fn method_config(params: Option<serde_json::Value>) -> Result<MethodConfig, ApiError> {
    let cfg: MethodConfig = match params {
        None | Some(serde_json::Value::Null) => MethodConfig::default(),
        Some(v) => serde_json::from_value(v).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("bad params: {e}")))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

async fn run_segment(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<SegmentRequest>,
) -> Result<Json<SegmentResponse>, ApiError> {
    let start = Instant::now();
    let session = state.session(&id)?;
    let method: SegMethod = req.method.parse().map_err(|e: Error| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let cfg = method_config(req.params)?;
    let weights = match method {
        SegMethod::Net(m) => Some(state.cfg.weights.get(&m).cloned().ok_or_else(|| {
            ApiError::new(StatusCode::BAD_REQUEST, format!("no weights configured for {m}"))
        })?),
        _ => None,
    };

    // the session stays locked for the whole run so a marker update cannot
    // interleave with it
    let mut s = session.lock().await;
    let markers = s
        .markers
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "place at least 3 markers first"))?;
    let marker_version = s.marker_version;
    let fidelity = cfg.fidelity();
    let cached = s
        .cache
        .as_ref()
        .filter(|c| c.marker_version == marker_version && c.fidelity == fidelity)
        .map(|c| (c.bundle.clone(), c.marker_version));
    let image = s.image.clone();

    let work = tokio::task::spawn_blocking(move || -> Result<_, Error> {
        let t0 = Instant::now();
        let (bundle, fields_version, built) = match cached {
            Some((b, v)) => (b, v, false),
            None => (Arc::new(FidelityBundle::build(&image, &markers, &fidelity)?), marker_version, true),
        };
        let fields_ms = if built { t0.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        let t1 = Instant::now();
        let seg = segment(&image, &markers, &bundle, method, &cfg, weights.as_deref())?;
        Ok((bundle, fields_version, built, seg, fields_ms, t1.elapsed().as_secs_f64() * 1e3))
    });
    let budget = state.cfg.time_budget;
    let (bundle, fields_version, built, seg, fields_ms, solve_ms) = tokio::time::timeout(budget, work)
        .await
        .map_err(|_| {
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                format!("segmentation exceeded the {} s budget", budget.as_secs_f64()),
            )
        })?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))??;
    if built {
        s.cache = Some(CachedFields { marker_version: fields_version, fidelity, bundle });
    }
    drop(s);

    let (height, width) = seg.mask.dims();
    let mask = rle::encode(&seg.mask);
    let population = rle::population(&mask);
    let u = base64::engine::general_purpose::STANDARD.encode(encode_pgm(height, width, seg.u.data()));
    Ok(Json(SegmentResponse {
        method: method.as_str().to_string(),
        height,
        width,
        mask,
        population,
        u,
        timings: Timings {
            fields_ms,
            solve_ms,
            total_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        marker_version,
        fields_version,
    }))
}
