//! JSON-over-HTTP editing API around an [`EditSession`].
//!
//! Mutations are validated, journaled, then applied while holding one writer
//! lock, so they are serialized and write-ahead. Renders take a read lock
//! and run on the blocking pool.

mod journal;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use vqnerf_core::brdf::EnvironmentMap;
use vqnerf_core::edit::{EditError, EditOp, EditRequest, EditSession, Lighting, MaterialInfo, RenderMode};
use vqnerf_core::image;

pub use journal::{Journal, JournalError};

/// Bind address used when neither a flag nor `VQNERF_ADDR` is given.
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

/// JSON error body `{code, message}` with its HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }
}

impl From<EditError> for ApiError {
    fn from(e: EditError) -> Self {
        let status = match &e {
            EditError::UnknownView { .. } => StatusCode::NOT_FOUND,
            EditError::OutOfBounds { .. } | EditError::InvalidRequest { .. } => StatusCode::BAD_REQUEST,
            EditError::Background { .. } | EditError::UnknownMaterial { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            EditError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<JournalError> for ApiError {
    fn from(e: JournalError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "journal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "code": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// The session plus its journal; the journal lock is the writer queue.
pub struct AppState {
    session: RwLock<EditSession>,
    journal: Mutex<Option<Journal>>,
}

impl AppState {
    /// Wraps `session`, replaying and then extending the journal at
    /// `journal` when given.
    pub fn open(mut session: EditSession, journal: Option<&std::path::Path>) -> Result<Arc<Self>, JournalError> {
        let journal = journal.map(|p| Journal::open(p, &mut session)).transpose()?;
        Ok(Arc::new(AppState {
            session: RwLock::new(session),
            journal: Mutex::new(journal),
        }))
    }

    /// Validates, journals and applies one op.
    pub fn mutate(&self, op: &EditOp) -> ApiResult<()> {
        let mut journal = self.journal.lock().unwrap_or_else(|e| e.into_inner());
        self.session.read().unwrap_or_else(|e| e.into_inner()).validate(op)?;
        if let Some(j) = journal.as_mut() {
            j.append(op)?;
        }
        self.session.write().unwrap_or_else(|e| e.into_inner()).apply(op)?;
        Ok(())
    }

    /// Runs `f` against a read snapshot of the session.
    pub fn read<R>(&self, f: impl FnOnce(&EditSession) -> R) -> R {
        f(&self.session.read().unwrap_or_else(|e| e.into_inner()))
    }
}

async fn blocking<R: Send + 'static>(state: &Arc<AppState>, f: impl FnOnce(&EditSession) -> ApiResult<R> + Send + 'static) -> ApiResult<R> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || state.read(f))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn mutate(state: &Arc<AppState>, op: EditOp) -> ApiResult<()> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || state.mutate(&op))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", e.to_string()))
}

fn param<T: std::str::FromStr>(q: &HashMap<String, String>, name: &str) -> ApiResult<T> {
    let v = q.get(name).ok_or_else(|| ApiError::bad_request(format!("missing query parameter `{name}`")))?;
    v.parse().map_err(|_| ApiError::bad_request(format!("bad `{name}`: `{v}`")))
}

#[derive(serde::Serialize)]
struct ViewInfo {
    id: usize,
    width: usize,
    height: usize,
}

async fn views(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    Ok(Json(state.read(|s| {
        let views: Vec<ViewInfo> = s
            .bundle()
            .views
            .iter()
            .enumerate()
            .map(|(id, v)| ViewInfo {
                id,
                width: v.gbuffer.width,
                height: v.gbuffer.height,
            })
            .collect();
        serde_json::json!({ "views": views, "m": s.m(), "model_hash": s.model_hash() })
    })))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

/// `GET /api/render?view&branch[&format=raw]`: gamma-encoded PNG, or
/// little-endian `f32` linear RGB with `x-width` / `x-height` headers.
async fn render(State(state): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let view: usize = param(&q, "view")?;
    let mode: RenderMode = match q.get("branch") {
        Some(b) => b.parse()?,
        None => RenderMode::Edited,
    };
    let raw = match q.get("format").map(String::as_str) {
        None | Some("png") => false,
        Some("raw") => true,
        Some(f) => return Err(ApiError::bad_request(format!("unknown format `{f}`; expected png or raw"))),
    };
    let (img, w, h) = blocking(&state, move |s| {
        let g = &s.view(view)?.gbuffer;
        let (w, h) = (g.width, g.height);
        Ok((s.render(view, mode)?, w, h))
    })
    .await?;
    if raw {
        let mut headers = HeaderMap::new();
        headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
        headers.insert("x-width", HeaderValue::from(w));
        headers.insert("x-height", HeaderValue::from(h));
        return Ok((headers, image::to_raw(&img)).into_response());
    }
    let png = image::to_png(&img, w, h).map_err(EditError::from)?;
    Ok(png_response(png))
}

async fn segmentation(State(state): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let view: usize = param(&q, "view")?;
    let png = blocking(&state, move |s| Ok(s.segmentation(view)?.to_png().map_err(EditError::from)?)).await?;
    Ok(png_response(png))
}

async fn materials(State(state): State<Arc<AppState>>) -> Json<Vec<MaterialInfo>> {
    Json(state.read(|s| s.materials()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectBody {
    view: usize,
    x: usize,
    y: usize,
}

async fn select(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let b: SelectBody = parse_json(&body)?;
    blocking(&state, move |s| {
        let index = s.select_material(b.view, b.x, b.y)?;
        let material = s.materials().swap_remove(index);
        Ok(Json(serde_json::json!({ "index": index, "material": material })))
    })
    .await
}

async fn edit(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Vec<MaterialInfo>>> {
    let req: EditRequest = parse_json(&body)?;
    mutate(&state, EditOp::Edit(req)).await?;
    Ok(Json(state.read(|s| s.materials())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RelightBody {
    /// `original` or an environment preset name.
    preset: String,
    #[serde(default)]
    intensity: Option<f64>,
}

fn lighting_for(preset: &str) -> Lighting {
    match preset {
        "original" => Lighting::Original,
        name => Lighting::Preset { name: name.to_string() },
    }
}

/// `POST /api/relight`: JSON `{preset, intensity?}` or a multipart upload
/// with an `env` file (binary or text environment map) and an optional
/// `intensity` field.
async fn relight(State(state): State<Arc<AppState>>, req: Request) -> ApiResult<Json<serde_json::Value>> {
    let multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let op = if multipart {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let mut env = None;
        let mut intensity = 1.0;
        while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
            let name = field.name().unwrap_or_default().to_string();
            let data = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
            match name.as_str() {
                "env" => {
                    let map = EnvironmentMap::<f32>::from_bytes(&data, std::path::Path::new("upload"))
                        .map_err(|e| ApiError::bad_request(e.to_string()))?;
                    env = Some(Lighting::Map {
                        rows: map.rows(),
                        cols: map.cols(),
                        radiance: map.radiance().to_vec(),
                    });
                }
                "intensity" => {
                    let text = String::from_utf8_lossy(&data);
                    intensity = text.trim().parse().map_err(|_| ApiError::bad_request(format!("bad intensity `{text}`")))?;
                }
                other => return Err(ApiError::bad_request(format!("unexpected form field `{other}`"))),
            }
        }
        let lighting = env.ok_or_else(|| ApiError::bad_request("multipart relight needs an `env` file"))?;
        EditOp::Relight { lighting, intensity }
    } else {
        let body = Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let b: RelightBody = parse_json(&body)?;
        EditOp::Relight {
            lighting: lighting_for(&b.preset),
            intensity: b.intensity.unwrap_or(1.0),
        }
    };
    mutate(&state, op).await?;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn reset(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    mutate(&state, EditOp::Reset).await?;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/views", get(views))
        .route("/api/render", get(render))
        .route("/api/segmentation", get(segmentation))
        .route("/api/materials", get(materials))
        .route("/api/select", post(select))
        .route("/api/edit", post(edit))
        .route("/api/relight", post(relight))
        .route("/api/reset", post(reset))
        .fallback(not_found)
        .with_state(state)
}

/// Binds `addr` and serves until the process stops. Fails when the address
/// is unavailable.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Binds first so callers see address errors before serving starts.
pub async fn bind(addr: SocketAddr) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}

/// Serves on an already bound listener.
pub async fn serve_on(state: Arc<AppState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
