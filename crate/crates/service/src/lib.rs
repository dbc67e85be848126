//! HTTP JSON API over a loaded checkpoint.
//!
//! Every route lives under `/api/v1` and is mirrored under `/api`. Sampling
//! is synchronous: a request runs its own sampler on the blocking pool and
//! the finished result is kept in a small LRU session store so later calls
//! (attention inspection, counting, edits) can refer to it by id.

use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use mclr::counting::{self, CountingConfig};
use mclr::diffusion::{self, GenerationResult, SampleRequest};
use mclr::editing::{self, DiffReport, EditDirective};
use mclr::model::MotionModel;
use mclr::network::AttnKind;
use mclr::persistence::{self, MotionExport};
use mclr::ErrorClass;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

pub const SESSION_CAPACITY: usize = 32;
/// Maps with a side longer than this are average-pooled before transfer.
pub const TRANSFER_LIMIT: usize = 256;

#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        let error = match status {
            StatusCode::BAD_REQUEST => "bad_request",
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::UNPROCESSABLE_ENTITY => "out_of_range",
            _ => "internal",
        };
        Self {
            status,
            error,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session id {id:?}"))
    }
}

impl From<mclr::Error> for ApiError {
    fn from(e: mclr::Error) -> Self {
        let status = match e.class() {
            ErrorClass::Usage | ErrorClass::Data => StatusCode::BAD_REQUEST,
            ErrorClass::Range => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorClass::Numeric => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// A finished generation and the request that reproduces it.
#[derive(Debug)]
pub struct Session {
    pub request: SampleRequest,
    pub result: GenerationResult,
}

pub struct AppState {
    pub model: Arc<MotionModel>,
    pub checkpoint_hash: String,
    sessions: Mutex<LruCache<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(model: MotionModel, checkpoint_hash: impl Into<String>) -> Self {
        Self {
            model: Arc::new(model),
            checkpoint_hash: checkpoint_hash.into(),
            sessions: Mutex::new(LruCache::new(NonZeroUsize::new(SESSION_CAPACITY).unwrap())),
        }
    }

    pub fn from_checkpoint(dir: &Path) -> mclr::Result<Self> {
        let ck = persistence::load_checkpoint(dir)?;
        Ok(Self::new(ck.model, ck.manifest_hash))
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn store(&self, session: Session) -> String {
        let id = session_id(&session.request, &session.result.directives, &session.result.prompt);
        self.sessions.lock().unwrap().put(id.clone(), Arc::new(session));
        id
    }
}

/// Ids are content hashes: the same request always maps to the same id.
fn session_id(request: &SampleRequest, directives: &[EditDirective], prompt: &str) -> String {
    let key = serde_json::json!({ "request": request, "directives": directives, "prompt": prompt });
    let digest = Sha256::digest(key.to_string().as_bytes());
    digest[..12].iter().map(|b| format!("{b:02x}")).collect()
}

/// Labels of the cross-attention columns: BOS, then the prompt words.
fn column_labels(result: &GenerationResult) -> Vec<String> {
    std::iter::once(mclr::text::BOS.to_string())
        .chain(result.tokens.words.iter().cloned())
        .collect()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("sampler task failed: {e}")))?
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateBody {
    pub prompt: String,
    #[serde(default)]
    pub frames: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cfg_weight: Option<f64>,
}

impl GenerateBody {
    fn request(&self, model: &MotionModel) -> SampleRequest {
        let mut r = SampleRequest::new(
            self.prompt.clone(),
            self.frames.unwrap_or(model.config.frames),
            self.seed,
        );
        if let Some(w) = self.cfg_weight {
            r.config.cfg_weight = w;
        }
        r
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub id: String,
    pub motion: MotionExport,
    /// Token labels of the cross-attention columns, BOS first.
    pub word_tokens: Vec<String>,
}

async fn generate(
    State(state): State<Arc<AppState>>,
    body: Result<Json<GenerateBody>, JsonRejection>,
) -> ApiResult<GenerateResponse> {
    let Json(body) = body?;
    let st = state.clone();
    blocking(move || {
        let request = body.request(&st.model);
        request.config.validate()?;
        let result = diffusion::generate(&st.model, &request)?;
        let motion = persistence::export_motion(&result.motion);
        let word_tokens = column_labels(&result);
        let id = st.store(Session { request, result });
        Ok(Json(GenerateResponse {
            id,
            motion,
            word_tokens,
        }))
    })
    .await
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditBody {
    #[serde(default)]
    pub base_id: Option<String>,
    #[serde(default)]
    pub base: Option<GenerateBody>,
    pub directive: EditDirective,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditResponse {
    pub id: String,
    pub reference_id: String,
    pub reference_motion: MotionExport,
    pub edited_motion: MotionExport,
    pub diff_summary: DiffReport,
    /// Extra variants of example-based generation beyond the first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variant_motions: Vec<MotionExport>,
}

async fn edit(
    State(state): State<Arc<AppState>>,
    body: Result<Json<EditBody>, JsonRejection>,
) -> ApiResult<EditResponse> {
    let Json(body) = body?;
    let request = match (&body.base_id, &body.base) {
        (Some(id), None) => state
            .session(id)
            .ok_or_else(|| ApiError::not_found(id))?
            .request
            .clone(),
        (None, Some(base)) => base.request(&state.model),
        _ => return Err(ApiError::bad_request("exactly one of base_id and base is required")),
    };
    let st = state.clone();
    blocking(move || {
        request.config.validate()?;
        let session = editing::run_edit(&st.model, &request, &body.directive)?;
        let reference_motion = persistence::export_motion(&session.reference.motion);
        let edited_motion = persistence::export_motion(&session.edited.motion);
        let variant_motions = session
            .variants
            .iter()
            .map(|v| persistence::export_motion(&v.motion))
            .collect();
        let reference_id = st.store(Session {
            request: request.clone(),
            result: session.reference,
        });
        let id = st.store(Session {
            request,
            result: session.edited,
        });
        Ok(Json(EditResponse {
            id,
            reference_id,
            reference_motion,
            edited_motion,
            diff_summary: session.diff,
            variant_motions,
        }))
    })
    .await
}

#[derive(Debug, Clone, Deserialize)]
pub struct AttentionQuery {
    pub kind: String,
    pub layer: usize,
    pub step: usize,
    #[serde(default)]
    pub head: usize,
    #[serde(default)]
    pub raw: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttentionResponse {
    pub id: String,
    pub kind: String,
    pub layer: usize,
    pub step: usize,
    pub head: usize,
    /// Dimensions of `values` (row-major).
    pub dims: [usize; 2],
    /// Dimensions of the recorded map before any transfer pooling.
    pub source_dims: [usize; 2],
    pub pooled: bool,
    pub values: Vec<f32>,
    /// Column labels of cross maps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<String>>,
}

/// Average-pools each axis by `⌈n / limit⌉`, trailing partial blocks
/// included. Maps within the limit come back unchanged.
pub fn pool_for_transfer(map: &Array2<f32>, limit: usize) -> Array2<f32> {
    let (r, c) = map.dim();
    let (fr, fc) = (r.div_ceil(limit).max(1), c.div_ceil(limit).max(1));
    if fr == 1 && fc == 1 {
        return map.clone();
    }
    Array2::from_shape_fn((r.div_ceil(fr), c.div_ceil(fc)), |(i, j)| {
        let block = map.slice(ndarray::s![
            i * fr..((i + 1) * fr).min(r),
            j * fc..((j + 1) * fc).min(c)
        ]);
        let sum: f64 = block.iter().map(|&v| v as f64).sum();
        (sum / block.len() as f64) as f32
    })
}

async fn attention(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<AttentionQuery>, QueryRejection>,
) -> ApiResult<AttentionResponse> {
    let Query(q) = query?;
    let kind: AttnKind = q.kind.parse()?;
    let raw = match q.raw.as_deref() {
        None | Some("0") | Some("false") => false,
        Some("1") | Some("true") => true,
        Some(other) => return Err(ApiError::bad_request(format!("raw must be 0 or 1, got {other:?}"))),
    };
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let record = session.result.record(kind, q.layer, q.step, q.head).ok_or_else(|| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "no {} record for layer {}, step {}, head {}",
                kind.as_str(),
                q.layer,
                q.step,
                q.head
            ),
        )
    })?;
    let map = record.effective();
    let out = if raw {
        map.clone()
    } else {
        pool_for_transfer(map, TRANSFER_LIMIT)
    };
    let (r, c) = out.dim();
    Ok(Json(AttentionResponse {
        id,
        kind: kind.as_str().to_string(),
        layer: q.layer,
        step: q.step,
        head: q.head,
        dims: [r, c],
        source_dims: [map.nrows(), map.ncols()],
        pooled: out.dim() != map.dim(),
        values: out.iter().copied().collect(),
        words: (kind == AttnKind::Cross).then(|| column_labels(&session.result)),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionPayload {
    pub dims: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountBody {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub attention: Option<AttentionPayload>,
    #[serde(default)]
    pub config: CountingConfig,
    /// Self-attention layer to read for id-based counts; all full-resolution
    /// layers are averaged when absent.
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub step: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CountResponse {
    pub count: f64,
    pub per_row_peaks: Vec<usize>,
    pub config: CountingConfig,
}

async fn count(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CountBody>, JsonRejection>,
) -> ApiResult<CountResponse> {
    let Json(body) = body?;
    body.config.validate()?;
    let map = match (&body.id, body.attention) {
        (Some(id), None) => {
            let session = state.session(id).ok_or_else(|| ApiError::not_found(id))?;
            counting::self_attention_map(&session.result, body.layer, body.step)?
        }
        (None, Some(p)) => {
            let [r, c] = p.dims;
            if r * c != p.values.len() {
                return Err(ApiError::bad_request(format!(
                    "attention dims {r}×{c} do not match {} values",
                    p.values.len()
                )));
            }
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(ApiError::bad_request("attention values must be finite"));
            }
            Array2::from_shape_vec((r, c), p.values).map_err(|e| ApiError::bad_request(e.to_string()))?
        }
        _ => return Err(ApiError::bad_request("exactly one of id and attention is required")),
    };
    let config = body.config;
    blocking(move || {
        let r = counting::count_actions(&map, &config)?;
        Ok(Json(CountResponse {
            count: r.count,
            per_row_peaks: r.per_row_peaks,
            config: r.config,
        }))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub checkpoint_hash: String,
    pub attention_layers: usize,
    pub sessions: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        checkpoint_hash: state.checkpoint_hash.clone(),
        attention_layers: state.model.attention_layers(),
        sessions: state.session_count(),
    })
}

fn api_routes() -> Router<Arc<AppState>> {
    Router::new()
        .route("/generate", post(generate))
        .route("/edit", post(edit))
        .route("/attention/{id}", get(attention))
        .route("/count", post(count))
        .route("/health", get(health))
}

/// The full application: versioned API, unversioned aliases, CORS and,
/// optionally, the UI bundle as a static fallback.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let mut app = Router::new()
        .nest("/api/v1", api_routes())
        .nest("/api", api_routes())
        .with_state(state);
    if let Some(dir) = static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.layer(cors)
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
