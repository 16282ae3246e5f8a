//! Session-oriented HTTP API over the prompt-refinement loop.
//!
//! Routes:
//! - `POST /sessions` with a native or NIfTI volume body (or JSON
//!   `{"path": ..}`) creates a session and runs the unprompted step.
//! - `POST /sessions/{id}/prompts` with `{"point": [i,j,k], "label": 1}`
//!   adds a click and runs one refinement step. `Idempotency-Key` makes a
//!   retry return the first response without another step.
//! - `PUT /sessions/{id}/ground_truth` registers a mask for live Dice.
//! - `GET /sessions/{id}/slice?axis=z&index=k&layer=image|mask|confidence`
//!   returns one plane as raw little-endian values; the `X-Slab-Meta`
//!   header carries its JSON description.
//! - `GET /sessions/{id}`, `GET /sessions/{id}/trace`,
//!   `DELETE /sessions/{id}`, `GET /health`.
//!
//! Sessions idle longer than the configured timeout answer `410 Gone`.

use std::collections::{HashMap, HashSet};
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use sat3d_core::inference::{plan_windows, SlidingWindowPlan, Windowed, OVERLAP};
use sat3d_core::metrics::dsc;
use sat3d_core::netblocks::{ImageEmbedding, Sat3d};
use sat3d_core::promptloop::{refine_step, EpisodeTrace, PointPrompt, PromptState, PromptableModel, StepOutput, TraceStep};
use sat3d_core::volgrid::{decode_mask, decode_volume, load_volume, znormalize, BinaryMask, Volume};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use uuid::Uuid;

pub const SLAB_META: &str = "x-slab-meta";
pub const IDEMPOTENCY_KEY: &str = "idempotency-key";

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub idle_timeout: Duration,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
    /// Name reported for the loaded weights.
    pub checkpoint_id: String,
    pub max_upload_bytes: usize,
    /// Directory for `<id>.json` trace files, rewritten after every step.
    pub trace_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { idle_timeout: Duration::from_secs(3600), cors_origin: None, checkpoint_id: "untrained".into(), max_upload_bytes: 1 << 30, trace_dir: None }
    }
}

/// Error body: `{"error": code, "message": text}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<sat3d_core::Error> for ApiError {
    fn from(e: sat3d_core::Error) -> Self {
        use sat3d_core::Error as E;
        let (status, code) = match &e {
            E::Format(_) | E::Integrity(_) | E::Metadata(_) | E::Json(_) => (StatusCode::BAD_REQUEST, "bad_volume"),
            E::PromptBounds { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "prompt_out_of_bounds"),
            E::Shape(_) => (StatusCode::UNPROCESSABLE_ENTITY, "shape_mismatch"),
            E::Io(_) => (StatusCode::BAD_REQUEST, "unreadable_path"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// One interactive segmentation.
pub struct Session {
    pub id: Uuid,
    pub volume: Volume,
    plan: SlidingWindowPlan,
    embeds: Vec<ImageEmbedding>,
    pub state: PromptState,
    pub last: StepOutput,
    pub gt: Option<BinaryMask>,
    trace: Vec<TraceStep>,
    created: SystemTime,
    last_used: Instant,
    /// Image display hints: 0.5th and 99.5th intensity percentiles.
    intensity_range: (f32, f32),
    replies: HashMap<String, (PromptRequest, Value)>,
}

impl Session {
    fn step(&mut self, model: &Sat3d) -> sat3d_core::Result<()> {
        let w = Windowed { model, plan: self.plan.clone() };
        let out = refine_step(&w, &self.embeds, &mut self.state)?;
        self.trace.push(TraceStep {
            step: out.step,
            point: (out.step > 0).then(|| *out.points.last().expect("clicks after step 0")),
            dice: self.gt.as_ref().and_then(|g| dsc(&out.pred, g).ok()),
            foreground: out.pred.count(),
            loss: None,
        });
        self.last = out;
        Ok(())
    }

    fn summary(&self, checkpoint: &str) -> Value {
        let s = self.volume.spacing().as_array();
        json!({
            "id": self.id,
            "shape": self.volume.dims(),
            "channels": self.volume.channels(),
            "spacing": s,
            "step": self.last.step,
            "points": self.state.points,
            "foreground": self.last.pred.count(),
            "dice": self.dice(),
            "checkpoint": checkpoint,
            "created": self.created.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        })
    }

    fn dice(&self) -> Option<f64> {
        self.gt.as_ref().and_then(|g| dsc(&self.last.pred, g).ok())
    }

    pub fn trace(&self) -> EpisodeTrace {
        EpisodeTrace { points: self.trace.iter().filter_map(|t| t.point).collect(), steps: self.trace.clone() }
    }
}

type Shared = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    pub model: Arc<Sat3d>,
    pub config: ServeConfig,
    sessions: Mutex<HashMap<Uuid, Shared>>,
    expired: Mutex<HashSet<Uuid>>,
}

impl AppState {
    pub fn new(model: Sat3d, config: ServeConfig) -> Arc<Self> {
        Arc::new(Self { model: Arc::new(model), config, sessions: Mutex::default(), expired: Mutex::default() })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Registers a session built with [`new_session`].
    pub fn insert(&self, s: Session) -> Uuid {
        let id = s.id;
        self.sessions.lock().unwrap().insert(id, Arc::new(tokio::sync::Mutex::new(s)));
        id
    }

    /// Moves idle sessions to the expired set.
    pub fn sweep(&self) {
        let mut sessions = self.sessions.lock().unwrap();
        let stale: Vec<Uuid> = sessions
            .iter()
            .filter(|(_, s)| s.try_lock().is_ok_and(|s| s.last_used.elapsed() > self.config.idle_timeout))
            .map(|(id, _)| *id)
            .collect();
        let mut expired = self.expired.lock().unwrap();
        for id in stale {
            sessions.remove(&id);
            expired.insert(id);
        }
    }

    async fn session(&self, id: &str) -> ApiResult<tokio::sync::OwnedMutexGuard<Session>> {
        let id = Uuid::parse_str(id).map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "no_session", format!("no session {id}")))?;
        let gone = || ApiError::new(StatusCode::GONE, "session_expired", format!("session {id} expired"));
        if self.expired.lock().unwrap().contains(&id) {
            return Err(gone());
        }
        let shared = self.sessions.lock().unwrap().get(&id).cloned();
        let shared = shared.ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_session", format!("no session {id}")))?;
        let mut guard = shared.lock_owned().await;
        if guard.last_used.elapsed() > self.config.idle_timeout {
            self.sessions.lock().unwrap().remove(&id);
            self.expired.lock().unwrap().insert(id);
            return Err(gone());
        }
        guard.last_used = Instant::now();
        Ok(guard)
    }
}

impl AppState {
    fn persist(&self, s: &Session) {
        if let Some(dir) = &self.config.trace_dir {
            let write = std::fs::create_dir_all(dir)
                .and_then(|_| std::fs::write(dir.join(format!("{}.json", s.id)), serde_json::to_vec_pretty(&s.trace()).unwrap_or_default()));
            if let Err(e) = write {
                tracing::warn!(session = %s.id, "trace not saved: {e}");
            }
        }
    }
}

/// Serves `router(state)` on `listener` until `shutdown` resolves, sweeping
/// idle sessions in the background.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    let period = state.config.idle_timeout.clamp(Duration::from_secs(1), Duration::from_secs(60));
    let sweeper = {
        let state = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                state.sweep();
            }
        })
    };
    let r = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    r
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_methods(Any)
        .allow_headers(Any)
        .expose_headers([HeaderName::from_static(SLAB_META)])
        .allow_origin(match &state.config.cors_origin {
            Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).unwrap_or(HeaderValue::from_static("null"))),
            None => AllowOrigin::any(),
        });
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/prompts", post(add_prompt))
        .route("/sessions/{id}/ground_truth", put(put_ground_truth))
        .route("/sessions/{id}/slice", get(get_slice))
        .route("/sessions/{id}/trace", get(get_trace))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "checkpoint": st.config.checkpoint_id,
        "input_size": st.model.config.input_size,
        "sessions": st.session_count(),
    }))
}

#[derive(Deserialize)]
struct CreateQuery {
    #[serde(default)]
    normalize: bool,
}

#[derive(Deserialize)]
struct PathUpload {
    path: String,
    #[serde(default)]
    ground_truth: Option<String>,
}

/// Runs CPU-bound model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn percentile_range(v: &Volume) -> (f32, f32) {
    let mut x: Vec<f32> = v.channel(0).iter().copied().filter(|x| x.is_finite()).collect();
    if x.is_empty() {
        return (0.0, 1.0);
    }
    x.sort_by(f32::total_cmp);
    let at = |q: f64| x[((x.len() - 1) as f64 * q).round() as usize];
    (at(0.005), at(0.995))
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    Query(q): Query<CreateQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let is_json = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).is_some_and(|v| v.starts_with("application/json"));
    let model = st.model.clone();
    let session = blocking(move || {
        let (volume, gt) = if is_json {
            let req: PathUpload = serde_json::from_slice(&body).map_err(|e| ApiError::bad(format!("invalid JSON: {e}")))?;
            let gt = match req.ground_truth {
                Some(p) => Some(sat3d_core::volgrid::load_mask(p)?),
                None => None,
            };
            (load_volume(&req.path)?, gt)
        } else {
            (decode_volume(&body)?, None)
        };
        if !volume.is_finite() {
            return Err(ApiError::bad("volume holds non-finite values"));
        }
        new_session(&model, volume, gt, q.normalize)
    })
    .await?;
    let body = session.summary(&st.config.checkpoint_id);
    st.persist(&session);
    st.sweep();
    st.sessions.lock().unwrap().insert(session.id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)))
}

/// Builds a session and eagerly runs the unprompted step.
pub fn new_session(model: &Sat3d, volume: Volume, gt: Option<BinaryMask>, normalize: bool) -> ApiResult<Session> {
    if volume.channels() != 1 {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "shape_mismatch", "the model takes single-channel volumes"));
    }
    if let Some(g) = &gt {
        if g.dims() != volume.dims() {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "shape_mismatch", "ground truth and volume differ in shape"));
        }
    }
    let input = if normalize { znormalize(&volume)? } else { volume.clone() };
    let patch = model.input_dims().expect("fixed input size");
    let plan = plan_windows(volume.dims(), patch, OVERLAP)?;
    let w = Windowed { model, plan: plan.clone() };
    let embeds = w.embed(&input)?;
    let mut state = PromptState::new(volume.dims(), volume.spacing(), usize::MAX);
    let first = refine_step(&w, &embeds, &mut state)?;
    let trace = vec![TraceStep {
        step: 0,
        point: None,
        dice: gt.as_ref().and_then(|g| dsc(&first.pred, g).ok()),
        foreground: first.pred.count(),
        loss: None,
    }];
    Ok(Session {
        id: Uuid::new_v4(),
        intensity_range: percentile_range(&volume),
        volume,
        plan,
        embeds,
        state,
        last: first,
        gt,
        trace,
        created: SystemTime::now(),
        last_used: Instant::now(),
        replies: HashMap::new(),
    })
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = st.session(&id).await?;
    Ok(Json(s.summary(&st.config.checkpoint_id)))
}

async fn delete_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let s = st.session(&id).await?;
    st.sessions.lock().unwrap().remove(&s.id);
    Ok(StatusCode::NO_CONTENT)
}

async fn get_trace(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<EpisodeTrace>> {
    Ok(Json(st.session(&id).await?.trace()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub point: [i64; 3],
    #[serde(default = "positive")]
    pub label: u8,
}

fn positive() -> u8 {
    1
}

async fn add_prompt(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<PromptRequest>,
) -> ApiResult<Json<Value>> {
    let key = headers.get(IDEMPOTENCY_KEY).map(|v| v.to_str().map(str::to_owned)).transpose().map_err(|_| ApiError::bad("bad idempotency key"))?;
    let mut s = st.session(&id).await?;
    if let Some(k) = &key {
        if let Some((prev, reply)) = s.replies.get(k) {
            if *prev != req {
                return Err(ApiError::new(StatusCode::CONFLICT, "idempotency_conflict", format!("key {k} was used for a different request")));
            }
            return Ok(Json(reply.clone()));
        }
    }
    if req.label > 1 {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_label", format!("label {} is not 0 or 1", req.label)));
    }
    let dims = s.volume.dims();
    if (0..3).any(|a| req.point[a] < 0 || req.point[a] as usize >= dims[a]) {
        return Err(sat3d_core::Error::PromptBounds { coord: req.point, dims }.into());
    }
    let model = st.model.clone();
    let checkpoint = st.config.checkpoint_id.clone();
    let (s, reply) = blocking(move || {
        let point = PointPrompt { coord: req.point, label: req.label };
        // apply to a copy of the state so a failed step leaves no trace
        let saved = (s.state.clone(), s.trace.len());
        s.state.points.push(point);
        if let Err(e) = s.step(&model) {
            s.state = saved.0;
            s.trace.truncate(saved.1);
            return Err(e.into());
        }
        let sid = s.id;
        let reply = json!({
            "step": s.last.step,
            "points": s.state.points,
            "foreground": s.last.pred.count(),
            "dice": s.dice(),
            "mask": format!("/sessions/{sid}/slice?layer=mask"),
            "confidence": format!("/sessions/{sid}/slice?layer=confidence"),
            "checkpoint": checkpoint,
        });
        if let Some(k) = key {
            s.replies.insert(k, (req, reply.clone()));
        }
        Ok((s, reply))
    })
    .await?;
    st.persist(&s);
    drop(s);
    Ok(Json(reply))
}

async fn put_ground_truth(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let mut s = st.session(&id).await?;
    let gt = decode_mask(&body)?;
    if gt.dims() != s.volume.dims() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "shape_mismatch", format!("mask {:?} vs volume {:?}", gt.dims(), s.volume.dims())));
    }
    s.gt = Some(gt);
    Ok(Json(json!({ "dice": s.dice(), "step": s.last.step })))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Image,
    Mask,
    Confidence,
}

#[derive(Deserialize)]
struct SliceQuery {
    #[serde(default = "default_axis")]
    axis: Axis,
    index: Option<usize>,
    #[serde(default = "default_layer")]
    layer: Layer,
}

fn default_axis() -> Axis {
    Axis::Z
}

fn default_layer() -> Layer {
    Layer::Image
}

/// Description of a slab returned in the `X-Slab-Meta` header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlabMeta {
    pub axis: Axis,
    pub index: usize,
    pub layer: Layer,
    /// Row count and row length of the payload.
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    /// Suggested display window `[low, high]`.
    pub window: [f32; 2],
    pub level: f32,
    pub step: usize,
}

/// Voxel indices of one plane in row-major order. Rows follow the first
/// remaining axis, columns the second.
pub fn plane_indices(dims: [usize; 3], axis: Axis, index: usize) -> (usize, usize, Vec<usize>) {
    let lin = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
    let (rows, cols) = match axis {
        Axis::X => (dims[1], dims[2]),
        Axis::Y => (dims[0], dims[2]),
        Axis::Z => (dims[0], dims[1]),
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(match axis {
                Axis::X => lin(index, r, c),
                Axis::Y => lin(r, index, c),
                Axis::Z => lin(r, c, index),
            });
        }
    }
    (rows, cols, out)
}

async fn get_slice(State(st): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<SliceQuery>) -> ApiResult<Response> {
    let s = st.session(&id).await?;
    let dims = s.volume.dims();
    let a = q.axis as usize;
    let index = q.index.unwrap_or(dims[a] / 2);
    if index >= dims[a] {
        return Err(ApiError::bad(format!("index {index} outside 0..{} on axis {:?}", dims[a], q.axis)));
    }
    let (rows, cols, idx) = plane_indices(dims, q.axis, index);
    let (bytes, dtype, window): (Vec<u8>, &str, [f32; 2]) = match q.layer {
        Layer::Image => {
            let v = s.volume.channel(0);
            let (lo, hi) = s.intensity_range;
            (idx.iter().flat_map(|&i| v[i].to_le_bytes()).collect(), "f32le", [lo, hi])
        }
        Layer::Confidence => {
            let c = s.last.confidence.data();
            (idx.iter().flat_map(|&i| c[i].to_le_bytes()).collect(), "f32le", [0.0, 1.0])
        }
        Layer::Mask => {
            let m = s.last.pred.data();
            (idx.iter().map(|&i| m[i]).collect(), "u8", [0.0, 1.0])
        }
    };
    let meta = SlabMeta { axis: q.axis, index, layer: q.layer, rows, cols, dtype: dtype.into(), window, level: (window[0] + window[1]) / 2.0, step: s.last.step };
    let meta = serde_json::to_string(&meta).expect("slab meta serialises");
    let mut resp = bytes.into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    h.insert(HeaderName::from_static(SLAB_META), HeaderValue::from_str(&meta).map_err(|e| ApiError::bad(e.to_string()))?);
    Ok(resp)
}
