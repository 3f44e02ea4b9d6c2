//! HTTP interface for interactive segmentation sessions.
//!
//! Each session owns a background thread that watches its mask queue and
//! fuses as soon as a barrier is due, so clients only post prompts and
//! follow the event stream.

mod image;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use divas_core::eval::{benchmark, benchmark_names, Benchmark};
use divas_core::geometry::Camera;
use divas_core::io::{write_fmap, write_vgrid, FloatMap};
use divas_core::render::ViewGeometry;
use divas_core::segment::MaskQueue;
use divas_core::session::{PlanMode, Session, SessionEvent, ViewId, ViewKind};
use divas_core::Error;

pub use image::{encode_mask_png, encode_rgb_png};

/// Env var holding the listen address.
pub const ADDR_ENV: &str = "DIVAS_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

const POLL_INTERVAL: Duration = Duration::from_millis(50);
const MAX_LONG_POLL_MS: u64 = 60_000;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str, id: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Unknown { .. } => StatusCode::NOT_FOUND,
            Error::NoSurface { .. } | Error::PromptOutOfBounds { .. } | Error::TargetBehindCamera => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::InvalidConfig(_) | Error::InvalidGrid(_) | Error::Infeasible(_) | Error::Empty(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::NoFusionYet => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

struct Slot {
    session: Mutex<Session>,
    changed: Notify,
    closed: AtomicBool,
}

impl Slot {
    fn lock(&self) -> std::sync::MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Fuses whenever the queue reports a due barrier and wakes event waiters
/// on any new event. Exits once the session is dropped or closed.
fn spawn_fuser(slot: Weak<Slot>, queue: Arc<MaskQueue>) {
    std::thread::spawn(move || loop {
        queue.wait_until_due(POLL_INTERVAL);
        let Some(slot) = slot.upgrade() else { break };
        if slot.closed.load(Ordering::Acquire) {
            break;
        }
        let grew = {
            let mut s = slot.lock();
            let before = s.last_seq();
            s.poll_masks();
            // Failures are recorded as events by the session.
            let _ = s.maybe_fuse();
            s.last_seq() != before
        };
        if grew {
            slot.changed.notify_waiters();
        }
    });
}

pub struct AppState {
    scenes: BTreeMap<String, Benchmark>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    next_id: AtomicU64,
}

impl AppState {
    /// State serving the shipped benchmark scenes.
    pub fn with_shipped_scenes() -> Self {
        let scenes = benchmark_names()
            .into_iter()
            .map(|n| (n.to_string(), benchmark(n).expect("shipped benchmarks are valid")))
            .collect();
        Self::new(scenes)
    }

    pub fn new(scenes: BTreeMap<String, Benchmark>) -> Self {
        Self {
            scenes,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }
}

/// Runs `f` against a session on the blocking pool so renders and fusion
/// never stall the async workers.
async fn with_session<T: Send + 'static>(
    state: &AppState,
    id: &str,
    f: impl FnOnce(&mut Session) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let slot = state.slot(id)?;
    let s2 = Arc::clone(&slot);
    let (out, grew) = tokio::task::spawn_blocking(move || {
        let mut s = s2.lock();
        let before = s.last_seq();
        let out = f(&mut s);
        let grew = s.last_seq() != before;
        (out, grew)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    if grew {
        slot.changed.notify_waiters();
    }
    out
}

#[derive(Deserialize)]
pub struct CreateSession {
    pub scene: String,
    #[serde(default)]
    pub mode: Option<PlanMode>,
    #[serde(rename = "N", default)]
    pub n: Option<usize>,
    #[serde(rename = "K_top", default)]
    pub k_top: Option<usize>,
    #[serde(default)]
    pub grid_res: Option<usize>,
    #[serde(default)]
    pub image_size: Option<u32>,
}

#[derive(Serialize, Deserialize)]
pub struct AnchorInfo {
    pub id: ViewId,
    pub pool_index: usize,
    pub camera: Camera,
    pub thumbnail_url: String,
}

#[derive(Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub anchors: Vec<AnchorInfo>,
    pub pool_size: usize,
    pub default_zoom: f64,
}

#[derive(Deserialize)]
pub struct PromptRequest {
    pub anchor_id: ViewId,
    pub px: u32,
    pub py: u32,
    #[serde(default)]
    pub zoom: Option<f64>,
    /// Closes the anchor's prompt group so fusion fires without waiting
    /// for more masks.
    #[serde(default)]
    pub last: bool,
}

#[derive(Serialize, Deserialize)]
pub struct PromptAccepted {
    pub centroid_id: ViewId,
    pub image_url: String,
}

#[derive(Default, Deserialize)]
pub struct FuseRequest {
    /// Fuse every collected mask even when no barrier is due.
    #[serde(default)]
    pub force: bool,
}

#[derive(Serialize, Deserialize)]
pub struct FuseResponse {
    pub fired: bool,
    pub version: u64,
}

#[derive(Deserialize)]
pub struct AddAnchor {
    pub pool_index: usize,
}

#[derive(Deserialize)]
pub struct OverlayQuery {
    pub version: Option<u64>,
}

#[derive(Deserialize)]
pub struct EventsQuery {
    pub after: Option<u64>,
    /// Long-poll timeout; 0 returns immediately.
    pub timeout_ms: Option<u64>,
}

fn image_url(session: &str, view: ViewId) -> String {
    format!("/sessions/{session}/views/{view}/image")
}

fn anchor_info(session_id: &str, s: &Session, id: ViewId) -> AnchorInfo {
    let rec = &s.views()[id];
    let pool_index = match rec.kind {
        ViewKind::Anchor { pool_index } => pool_index,
        ViewKind::Centroid(_) => usize::MAX,
    };
    AnchorInfo {
        id,
        pool_index,
        camera: rec.geometry.camera.clone(),
        thumbnail_url: image_url(session_id, id),
    }
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn binary_response(bytes: Vec<u8>, filename: &str) -> Response {
    (
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{filename}\"")),
        ],
        bytes,
    )
        .into_response()
}

fn parse_view(id: &str) -> ApiResult<ViewId> {
    id.parse().map_err(|_| ApiError::not_found("view", id))
}

async fn list_scenes(State(state): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(state.scenes.keys().cloned().collect())
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let bench = state
        .scenes
        .get(&req.scene)
        .ok_or_else(|| ApiError::not_found("scene", &req.scene))?;
    let mut config = bench.profile.clone();
    if let Some(m) = req.mode {
        config.mode = m;
    }
    if let Some(n) = req.n {
        config.n_views = n;
    }
    if let Some(k) = req.k_top {
        config.k_top = k;
    }
    if let Some(g) = req.grid_res {
        config.grid_res = g;
    }
    if let Some(s) = req.image_size {
        config.image_size = s;
    }
    let scene = Arc::new(bench.scene.clone());
    let session = tokio::task::spawn_blocking(move || Session::start(scene, config))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let anchors = session.anchors().iter().map(|a| anchor_info(&id, &session, *a)).collect();
    let created = SessionCreated {
        session_id: id.clone(),
        anchors,
        pool_size: session.pool().len(),
        default_zoom: session.config().default_zoom,
    };
    let queue = session.queue();
    let slot = Arc::new(Slot {
        session: Mutex::new(session),
        changed: Notify::new(),
        closed: AtomicBool::new(false),
    });
    spawn_fuser(Arc::downgrade(&slot), queue);
    state
        .sessions
        .write()
        .unwrap_or_else(|p| p.into_inner())
        .insert(id, slot);
    Ok((StatusCode::CREATED, Json(created)))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let slot = state
        .sessions
        .write()
        .unwrap_or_else(|p| p.into_inner())
        .remove(&id)
        .ok_or_else(|| ApiError::not_found("session", &id))?;
    slot.closed.store(true, Ordering::Release);
    slot.changed.notify_waiters();
    Ok(StatusCode::NO_CONTENT)
}

async fn list_pool(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<Camera>>> {
    with_session(&state, &id, |s| Ok(Json(s.pool().to_vec()))).await
}

async fn pool_image(
    State(state): State<Arc<AppState>>,
    Path((id, index)): Path<(String, usize)>,
) -> ApiResult<Response> {
    with_session(&state, &id, move |s| {
        let cam = s.pool().get(index).ok_or_else(|| ApiError::not_found("candidate view", index))?;
        let view = s.render(cam);
        Ok(png_response(encode_rgb_png(&view.rgb)?))
    })
    .await
}

async fn add_anchor(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<AddAnchor>,
) -> ApiResult<(StatusCode, Json<AnchorInfo>)> {
    let sid = id.clone();
    with_session(&state, &id, move |s| {
        let view = s.add_anchor(req.pool_index)?;
        Ok((StatusCode::CREATED, Json(anchor_info(&sid, s, view))))
    })
    .await
}

async fn list_anchors(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<AnchorInfo>>> {
    let sid = id.clone();
    with_session(&state, &id, move |s| {
        Ok(Json(s.anchors().iter().map(|a| anchor_info(&sid, s, *a)).collect()))
    })
    .await
}

fn view_geometry(s: &Session, view: &str) -> ApiResult<Arc<ViewGeometry>> {
    let id = parse_view(view)?;
    Ok(Arc::clone(&s.view(id)?.geometry))
}

async fn view_image(
    State(state): State<Arc<AppState>>,
    Path((id, view)): Path<(String, String)>,
) -> ApiResult<Response> {
    let geometry = with_session(&state, &id, move |s| view_geometry(s, &view)).await?;
    Ok(png_response(encode_rgb_png(&geometry.rgb)?))
}

async fn view_depth(
    State(state): State<Arc<AppState>>,
    Path((id, view)): Path<(String, String)>,
) -> ApiResult<Response> {
    let geometry = with_session(&state, &id, move |s| view_geometry(s, &view)).await?;
    let mut bytes = Vec::new();
    write_fmap(&FloatMap::from_view_stats(&geometry)?, &mut bytes)?;
    Ok(binary_response(bytes, "depth.fmap"))
}

async fn post_prompt(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<PromptRequest>,
) -> ApiResult<(StatusCode, Json<PromptAccepted>)> {
    let sid = id.clone();
    with_session(&state, &id, move |s| {
        if !s.anchors().contains(&req.anchor_id) {
            return Err(ApiError::not_found("anchor", req.anchor_id));
        }
        let zoom = req.zoom.unwrap_or(s.config().default_zoom);
        let centroid = s.submit_prompt(req.anchor_id, (req.px, req.py), zoom, req.last)?;
        Ok((
            StatusCode::CREATED,
            Json(PromptAccepted {
                centroid_id: centroid,
                image_url: image_url(&sid, centroid),
            }),
        ))
    })
    .await
}

async fn post_fuse(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<FuseResponse>> {
    let req: FuseRequest = if body.is_empty() {
        FuseRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?
    };
    with_session(&state, &id, move |s| {
        let fired = if req.force { s.fuse_now()? } else { s.maybe_fuse()? };
        Ok(Json(FuseResponse {
            fired: fired.is_some(),
            version: s.version(),
        }))
    })
    .await
}

async fn get_overlay(
    State(state): State<Arc<AppState>>,
    Path((id, view)): Path<(String, String)>,
    Query(q): Query<OverlayQuery>,
) -> ApiResult<Response> {
    let overlay = with_session(&state, &id, move |s| {
        let view = parse_view(&view)?;
        s.view(view)?;
        if let Some(v) = q.version {
            if v != s.version() {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("overlay version {v} is not current (current {})", s.version()),
                ));
            }
        }
        Ok(s.get_overlay(view)?)
    })
    .await?;
    Ok(png_response(encode_mask_png(&overlay)?))
}

async fn get_grid(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = with_session(&state, &id, |s| {
        let grid = s.grid().ok_or(Error::NoFusionYet)?;
        let mut bytes = Vec::new();
        write_vgrid(grid, &mut bytes)?;
        Ok(bytes)
    })
    .await?;
    Ok(binary_response(bytes, "occupancy.vgrid"))
}

#[derive(Serialize, Deserialize)]
pub struct EventBatch {
    pub events: Vec<SessionEvent>,
    /// Cursor to pass as `after` on the next call.
    pub cursor: Option<u64>,
}

async fn get_events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Json<EventBatch>> {
    let slot = state.slot(&id)?;
    let timeout = Duration::from_millis(q.timeout_ms.unwrap_or(0).min(MAX_LONG_POLL_MS));
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        // Register before reading so a notification between the read and
        // the wait is not lost.
        let notified = slot.changed.notified();
        tokio::pin!(notified);
        notified.as_mut().enable();
        let events = slot.lock().events_after(q.after);
        if !events.is_empty() || slot.closed.load(Ordering::Acquire) {
            let cursor = events.last().map(|e| e.seq).or(q.after);
            return Ok(Json(EventBatch { events, cursor }));
        }
        if tokio::time::timeout_at(deadline, notified).await.is_err() {
            return Ok(Json(EventBatch {
                events: Vec::new(),
                cursor: q.after,
            }));
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/scenes", get(list_scenes))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/pool", get(list_pool))
        .route("/sessions/{id}/pool/{index}/image", get(pool_image))
        .route("/sessions/{id}/anchors", get(list_anchors).post(add_anchor))
        .route("/sessions/{id}/views/{view}/image", get(view_image))
        .route("/sessions/{id}/views/{view}/depth", get(view_depth))
        .route("/sessions/{id}/prompts", post(post_prompt))
        .route("/sessions/{id}/fuse", post(post_fuse))
        .route("/sessions/{id}/overlay/{view}", get(get_overlay))
        .route("/sessions/{id}/grid", get(get_grid))
        .route("/sessions/{id}/events", get(get_events))
        .with_state(state)
}

/// Router plus static files for the UI bundle under `/`.
pub fn app(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let router = router(state);
    match static_dir {
        Some(dir) => router.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => router,
    }
}

/// Resolves the listen address: explicit value, then `DIVAS_ADDR`, then
/// the default.
pub fn resolve_addr(explicit: Option<String>) -> String {
    explicit
        .or_else(|| std::env::var(ADDR_ENV).ok())
        .unwrap_or_else(|| DEFAULT_ADDR.to_string())
}

pub async fn serve(addr: &str, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let state = Arc::new(AppState::with_shipped_scenes());
    axum::serve(listener, app(state, static_dir)).await
}
