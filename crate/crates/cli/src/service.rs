//! HTTP/JSON API over one loaded model.

use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lensflow_core::graph::{ModelEcho, PruneConfig};
use lensflow_core::{forward, ModelBundle, Trace};
use lru::LruCache;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::config::ServiceConfig;
use crate::request::{
    encode_prompt, lens_projection, parse_json, plan_graph, render_graph, GraphRequest, LensRequest, RequestError,
};

pub const TRACE_CACHE_SIZE: usize = 8;

/// Recent traces keyed by prompt. The lock is only held for lookups and
/// inserts, never across a forward pass.
pub struct TraceCache {
    inner: Mutex<LruCache<String, Arc<Trace>>>,
}

impl TraceCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity).unwrap_or(NonZeroUsize::MIN);
        Self {
            inner: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn get(&self, prompt: &str) -> Option<Arc<Trace>> {
        self.inner.lock().expect("cache lock").get(prompt).cloned()
    }

    pub fn insert(&self, prompt: String, trace: Arc<Trace>) {
        self.inner.lock().expect("cache lock").put(prompt, trace);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct AppState {
    pub bundle: Arc<ModelBundle>,
    pub prune: PruneConfig,
    pub cache: TraceCache,
}

impl AppState {
    pub fn new(bundle: ModelBundle, prune: PruneConfig) -> Self {
        Self {
            bundle: Arc::new(bundle),
            prune,
            cache: TraceCache::new(TRACE_CACHE_SIZE),
        }
    }
}

pub struct ApiError(StatusCode, String);

impl From<RequestError> for ApiError {
    fn from(e: RequestError) -> Self {
        let status = match e {
            RequestError::BadRequest(_) => StatusCode::BAD_REQUEST,
            RequestError::TooLong(_) => StatusCode::UNPROCESSABLE_ENTITY,
            RequestError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn json_body(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, RequestError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn cached_trace(state: &Arc<AppState>, prompt: &str, ids: Vec<u32>) -> Result<Arc<Trace>, ApiError> {
    if let Some(trace) = state.cache.get(prompt) {
        return Ok(trace);
    }
    let bundle = state.bundle.clone();
    let trace = Arc::new(blocking(move || Ok(forward(&bundle, &ids)?)).await?);
    state.cache.insert(prompt.to_string(), trace.clone());
    Ok(trace)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn model(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let cfg = state.bundle.config();
    Json(json!({
        "model": ModelEcho {
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_model: cfg.d_model,
            d_mlp: cfg.d_mlp,
            vocab_size: cfg.vocab_size,
            max_positions: cfg.max_positions,
        },
        "parameter_count": state.bundle.parameter_count(),
        "default_prune": state.prune,
    }))
}

async fn graph(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: GraphRequest = parse_json(&body)?;
    let plan = plan_graph(&state.bundle, &req, &state.prune)?;
    let trace = cached_trace(&state, &req.prompt, plan.ids.clone()).await?;
    let bundle = state.bundle.clone();
    let body = blocking(move || render_graph(&bundle, &trace, &plan)).await?;
    Ok(json_body(body))
}

async fn lens(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: LensRequest = parse_json(&body)?;
    let ids = encode_prompt(&state.bundle, &req.prompt)?;
    let trace = cached_trace(&state, &req.prompt, ids).await?;
    let bundle = state.bundle.clone();
    let projection = blocking(move || lens_projection(&bundle, &trace, &req)).await?;
    let body = serde_json::to_string(&projection).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(json_body(body))
}

async fn not_found() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "no such route".into())
}

/// API routes under `/api`; everything else is served from `static_dir`
/// when given, and is a JSON 404 otherwise.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/model", get(model))
        .route("/graph", post(graph))
        .route("/lens", post(lens))
        .fallback(not_found)
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir).fallback(axum::routing::any(not_found))),
        None => app.fallback(not_found),
    }
}

pub async fn serve(config: ServiceConfig, bundle: ModelBundle) -> anyhow::Result<()> {
    let state = Arc::new(AppState::new(bundle, config.prune.clone()));
    let app = router(state, config.static_dir.clone());
    let addr = format!("{}:{}", config.host, config.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
