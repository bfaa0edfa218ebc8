//! HTTP/JSON service for interactive co-occurrence editing.
//!
//! Sessions hold a tensor, a seed and an undo history. Synthesis runs on a
//! single worker thread that owns the model; requests beyond the queue
//! depth are turned away with 503.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use cooctex::synthesis::{edit_bin, interpolate_tensors};
use cooctex::{imageio, Checkpoint, CoocMatrix, CoocTensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;
use tower_http::cors::CorsLayer;

pub const DEFAULT_HISTORY: usize = 100;
pub const DEFAULT_QUEUE_DEPTH: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct ServiceConfig {
    pub queue_depth: usize,
    pub history: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            queue_depth: DEFAULT_QUEUE_DEPTH,
            history: DEFAULT_HISTORY,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn field(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            field: Some(field),
        }
    }

    fn not_found(id: u64) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match self.field {
            Some(f) => json!({ "error": self.message, "field": f }),
            None => json!({ "error": self.message }),
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Tensor as nested arrays: `values[y][x][a][b]`, `shape = [h, w, k, k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorJson {
    pub shape: [usize; 4],
    pub s: usize,
    pub values: Vec<Vec<Vec<Vec<f64>>>>,
}

impl TensorJson {
    pub fn from_tensor(t: &CoocTensor) -> Self {
        let (h, w) = t.dim();
        let k = t.k();
        let values = (0..h)
            .map(|y| {
                (0..w)
                    .map(|x| t.matrix_view(y, x).rows().into_iter().map(|r| r.to_vec()).collect())
                    .collect()
            })
            .collect();
        Self {
            shape: [h, w, k, k],
            s: t.s(),
            values,
        }
    }

    pub fn to_tensor(&self, field: &'static str) -> ApiResult<CoocTensor> {
        let [h, w, k, k2] = self.shape;
        let bad = |m: &str| ApiError::field(field, m.to_string());
        if k != k2 || h == 0 || w == 0 || k == 0 {
            return Err(bad("shape must be [h, w, k, k] with non-zero sizes"));
        }
        let mut flat = Vec::with_capacity(h * w * k * k);
        if self.values.len() != h {
            return Err(bad("values do not match shape"));
        }
        for row in &self.values {
            if row.len() != w {
                return Err(bad("values do not match shape"));
            }
            for m in row {
                if m.len() != k || m.iter().any(|r| r.len() != k) {
                    return Err(bad("values do not match shape"));
                }
                flat.extend(m.iter().flatten());
            }
        }
        let values = Array3::from_shape_vec((h, w, k * k), flat).map_err(|e| bad(&e.to_string()))?;
        let t = CoocTensor::from_values(values, self.s).map_err(|e| bad(&e.to_string()))?;
        t.validate(1e-6).map_err(|e| bad(&e.to_string()))?;
        Ok(t)
    }
}

#[derive(Debug, Clone)]
struct Session {
    tensor: CoocTensor,
    seed: u64,
    history: VecDeque<CoocTensor>,
}

impl Session {
    fn push(&mut self, next: CoocTensor, limit: usize) {
        let prev = std::mem::replace(&mut self.tensor, next);
        self.history.push_back(prev);
        while self.history.len() > limit {
            self.history.pop_front();
        }
    }
}

struct Job {
    tensor: CoocTensor,
    seed: u64,
    reply: oneshot::Sender<cooctex::Result<Vec<u8>>>,
}

/// Shared service state. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    checkpoint: Arc<Checkpoint>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    pending: AtomicUsize,
    jobs: Mutex<mpsc::Sender<Job>>,
}

impl AppState {
    /// Starts the inference worker.
    pub fn new(checkpoint: Checkpoint, config: ServiceConfig) -> Self {
        let checkpoint = Arc::new(checkpoint);
        let (tx, rx) = mpsc::channel::<Job>();
        let model = checkpoint.clone();
        std::thread::Builder::new()
            .name("cooctex-worker".into())
            .spawn(move || {
                for job in rx {
                    let out = cooctex::synthesis::synthesize(&model, &job.tensor, job.seed)
                        .and_then(|img| imageio::encode_png(img.view()));
                    let _ = job.reply.send(out);
                }
            })
            .expect("spawn worker thread");
        Self {
            inner: Arc::new(Inner {
                checkpoint,
                config,
                sessions: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
                pending: AtomicUsize::new(0),
                jobs: Mutex::new(tx),
            }),
        }
    }

    fn session(&self, id: u64) -> ApiResult<Arc<Mutex<Session>>> {
        self.inner.sessions.lock().unwrap().get(&id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    async fn render(&self, tensor: CoocTensor, seed: u64) -> ApiResult<Vec<u8>> {
        let pending = &self.inner.pending;
        if pending.fetch_add(1, Ordering::SeqCst) >= self.inner.config.queue_depth {
            pending.fetch_sub(1, Ordering::SeqCst);
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model busy, try again"));
        }
        let (reply, rx) = oneshot::channel();
        let sent = self.inner.jobs.lock().unwrap().send(Job { tensor, seed, reply });
        let out = match sent {
            Ok(()) => rx.await.map_err(ApiError::internal),
            Err(e) => Err(ApiError::internal(e)),
        };
        pending.fetch_sub(1, Ordering::SeqCst);
        out?.map_err(|e| match e {
            cooctex::Error::ShapeMismatch { .. } | cooctex::Error::InvalidArgument(_) => {
                ApiError::field("tensor", e.to_string())
            }
            e => ApiError::internal(e),
        })
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/palette", get(palette))
        .route("/session", post(create_session))
        .route("/session/{id}/tensor", get(get_tensor))
        .route("/session/{id}/edit", post(edit))
        .route("/session/{id}/synthesize", post(synthesize))
        .route("/session/{id}/interpolate", post(interpolate))
        .route("/session/{id}/undo", post(undo))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(checkpoint: Checkpoint, addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let app = router(AppState::new(checkpoint, config));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn palette(State(state): State<AppState>) -> Json<serde_json::Value> {
    let p = &state.inner.checkpoint.stats.palette;
    Json(json!({ "k": p.k(), "centers": p.centers(), "spreads": p.spreads() }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub tensor: Option<TensorJson>,
    /// A single matrix repeated over `cells`.
    pub matrix: Option<Vec<Vec<f64>>>,
    pub cells: Option<[usize; 2]>,
    /// Base64 PNG crop; its side lengths must be multiples of the scale.
    pub image: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionReply {
    pub id: u64,
    pub seed: u64,
    pub tensor: TensorJson,
}

async fn create_session(State(state): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult<Json<SessionReply>> {
    let ckpt = &state.inner.checkpoint;
    let k = ckpt.stats.palette.k();
    let s = ckpt.stats.downsample;
    let tensor = match (req.tensor, req.matrix, req.image) {
        (Some(t), None, None) => t.to_tensor("tensor")?,
        (None, Some(rows), None) => {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                return Err(ApiError::field("matrix", format!("expected a {k}x{k} matrix")));
            }
            let m = CoocMatrix::new(Array2::from_shape_vec((k, k), flat).unwrap())
                .map_err(|e| ApiError::field("matrix", e.to_string()))?;
            let [h, w] = req.cells.unwrap_or([4, 4]);
            CoocTensor::constant(&m, h, w, s).map_err(|e| ApiError::field("cells", e.to_string()))?
        }
        (None, None, Some(b64)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::field("image", e.to_string()))?;
            let model = ckpt.clone();
            tokio::task::spawn_blocking(move || {
                let img = imageio::decode(&bytes)?;
                cooctex::cooc::cooc_tensor(img.view(), &model.stats.palette, &model.stats.params, model.stats.downsample)
            })
            .await
            .map_err(ApiError::internal)?
            .map_err(|e| ApiError::field("image", e.to_string()))?
        }
        _ => return Err(ApiError::field("tensor", "give exactly one of tensor, matrix or image")),
    };
    if tensor.k() != k {
        return Err(ApiError::field("tensor", format!("model expects k = {k}, got {}", tensor.k())));
    }
    if tensor.s() != s {
        return Err(ApiError::field("tensor", format!("model expects s = {s}, got {}", tensor.s())));
    }
    let id = state.inner.next_id.fetch_add(1, Ordering::SeqCst);
    let seed = req.seed.unwrap_or(0);
    let reply = SessionReply {
        id,
        seed,
        tensor: TensorJson::from_tensor(&tensor),
    };
    let session = Session {
        tensor,
        seed,
        history: VecDeque::new(),
    };
    state.inner.sessions.lock().unwrap().insert(id, Arc::new(Mutex::new(session)));
    Ok(Json(reply))
}

async fn get_tensor(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<TensorJson>> {
    let session = state.session(id)?;
    let t = TensorJson::from_tensor(&session.lock().unwrap().tensor);
    Ok(Json(t))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub cell: Option<[usize; 2]>,
    pub bin: [usize; 2],
    pub factor: f64,
}

async fn edit(State(state): State<AppState>, Path(id): Path<u64>, Json(req): Json<EditRequest>) -> ApiResult<Json<TensorJson>> {
    let session = state.session(id)?;
    let mut s = session.lock().unwrap();
    let k = s.tensor.k();
    let [a, b] = req.bin;
    if a >= k || b >= k {
        return Err(ApiError::field("bin", format!("bin ({a}, {b}) outside 0..{k}")));
    }
    if !(req.factor.is_finite() && req.factor >= 0.0) {
        return Err(ApiError::field("factor", "factor must be finite and >= 0"));
    }
    let (h, w) = s.tensor.dim();
    let cells: Vec<(usize, usize)> = match req.cell {
        Some([y, x]) if y < h && x < w => vec![(y, x)],
        Some([y, x]) => return Err(ApiError::field("cell", format!("cell ({y}, {x}) outside {h}x{w}"))),
        None => (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect(),
    };
    let mut next = s.tensor.clone();
    for (y, x) in cells {
        let m = edit_bin(&s.tensor.matrix_at(y, x), a, b, req.factor).map_err(|e| ApiError::field("factor", e.to_string()))?;
        next.set_matrix(y, x, &m).map_err(ApiError::internal)?;
    }
    let limit = state.inner.config.history;
    s.push(next, limit);
    Ok(Json(TensorJson::from_tensor(&s.tensor)))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRequest {
    pub seed: Option<u64>,
}

async fn synthesize(State(state): State<AppState>, Path(id): Path<u64>, body: Option<Json<SynthRequest>>) -> ApiResult<Response> {
    let session = state.session(id)?;
    let (tensor, seed) = {
        let s = session.lock().unwrap();
        let seed = body.and_then(|Json(b)| b.seed).unwrap_or(s.seed);
        (s.tensor.clone(), seed)
    };
    let png = state.render(tensor, seed).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    pub other: TensorJson,
    pub t: f64,
}

async fn interpolate(State(state): State<AppState>, Path(id): Path<u64>, Json(req): Json<InterpolateRequest>) -> ApiResult<Json<TensorJson>> {
    let session = state.session(id)?;
    let other = req.other.to_tensor("other")?;
    if !req.t.is_finite() {
        return Err(ApiError::field("t", "t must be finite"));
    }
    let mut s = session.lock().unwrap();
    let next = interpolate_tensors(&s.tensor, &other, req.t).map_err(|e| ApiError::field("other", e.to_string()))?;
    let limit = state.inner.config.history;
    s.push(next, limit);
    Ok(Json(TensorJson::from_tensor(&s.tensor)))
}

async fn undo(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<TensorJson>> {
    let session = state.session(id)?;
    let mut s = session.lock().unwrap();
    let prev = s.history.pop_back().ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "nothing to undo"))?;
    s.tensor = prev;
    Ok(Json(TensorJson::from_tensor(&s.tensor)))
}
