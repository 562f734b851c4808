use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sourceconf_core::attribution::{AttributionConfig, Method as AttributionMethod};
use sourceconf_core::checkpoint::Checkpoint;
use sourceconf_core::pipeline::analyze;
use sourceconf_core::suggestions::{Suggestion, SuggestionIndex};
use sourceconf_core::Error;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::config::ServiceConfig;

pub const API_VERSION: u32 = 1;

pub struct Loaded {
    pub checkpoint: Option<Arc<Checkpoint>>,
    pub checkpoint_id: Option<String>,
    pub index: Option<Arc<SuggestionIndex>>,
    pub index_id: Option<String>,
}

pub struct AppState {
    pub config: ServiceConfig,
    pub loaded: Loaded,
    pub threshold: f64,
    gradients: Semaphore,
}

impl AppState {
    pub fn new(config: ServiceConfig, loaded: Loaded, threshold: f64) -> Self {
        let gradients = Semaphore::new(config.max_concurrent_gradients.max(1));
        Self { config, loaded, threshold, gradients }
    }

    /// Loads whatever the config points at and resolves the threshold.
    pub fn load(config: ServiceConfig) -> sourceconf_core::Result<Self> {
        config.validate()?;
        let checkpoint = config.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
        let index = config.index.as_deref().map(SuggestionIndex::load).transpose()?;
        let checkpoint_id = checkpoint.as_ref().map(Checkpoint::id);
        if let (Some(idx), Some(id)) = (&index, &checkpoint_id) {
            if &idx.meta.checkpoint_id != id {
                return Err(Error::Config(format!(
                    "index was built from checkpoint {} but {id} is configured",
                    idx.meta.checkpoint_id
                )));
            }
        }
        let (threshold, source) = config.resolve_threshold(config.checkpoint.as_deref())?;
        log::info!("serving with threshold {threshold} ({source})");
        let loaded = Loaded {
            index_id: index.as_ref().map(SuggestionIndex::id),
            checkpoint: checkpoint.map(Arc::new),
            checkpoint_id,
            index: index.map(Arc::new),
        };
        Ok(Self::new(config, loaded, threshold))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub v: u32,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

pub struct ApiError {
    status: StatusCode,
    message: String,
    id: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), id: None }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    /// Logs the cause under a fresh id and hides it from the client.
    fn internal(cause: impl std::fmt::Display) -> Self {
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0);
        let id = format!("{:x}-{:x}", nanos, COUNTER.fetch_add(1, Ordering::Relaxed));
        log::error!("request {id} failed: {cause}");
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, message: "internal error".into(), id: Some(id) }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(m) => ApiError::bad_request(m),
            other => ApiError::internal(other),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { v: API_VERSION, error: self.message, id: self.id };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceWord {
    pub text: String,
    pub uncertainty: f64,
    pub highlighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateResponse {
    pub v: u32,
    pub translation: String,
    pub source_words: Vec<SourceWord>,
    pub threshold: f64,
    pub model_id: String,
    pub truncated: bool,
    pub timing_ms: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuggestionsRequest {
    pub text: String,
    pub word_index: usize,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionsResponse {
    pub v: u32,
    pub word: String,
    pub word_index: usize,
    pub suggestions: Vec<Suggestion>,
    pub truncated: bool,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub v: u32,
    pub status: String,
    pub model_id: Option<String>,
    pub index_id: Option<String>,
}

fn checked_text(state: &AppState, text: &str) -> Result<String, ApiError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(ApiError::bad_request("text is empty"));
    }
    let chars = text.chars().count();
    if chars > state.config.max_input_chars {
        return Err(ApiError::bad_request(format!(
            "text has {chars} characters; the limit is {}",
            state.config.max_input_chars
        )));
    }
    Ok(text.to_string())
}

fn model(state: &AppState) -> Result<Arc<Checkpoint>, ApiError> {
    state.loaded.checkpoint.clone().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded"))
}

async fn translate(
    State(state): State<Arc<AppState>>,
    body: Result<Json<TranslateRequest>, JsonRejection>,
) -> Result<Json<TranslateResponse>, ApiError> {
    let start = Instant::now();
    let Json(req) = body?;
    let text = checked_text(&state, &req.text)?;
    let checkpoint = model(&state)?;
    let config = AttributionConfig {
        norm: state.config.norm,
        aggregation: state.config.aggregation,
        threshold: state.threshold,
        method: AttributionMethod::Gradient,
    };
    let decoding = state.config.decoding;
    let _permit = state.gradients.acquire().await.map_err(ApiError::internal)?;
    let analysis = tokio::task::spawn_blocking(move || analyze(&checkpoint, &text, decoding, config))
        .await
        .map_err(ApiError::internal)??;
    let a = &analysis.attribution;
    let source_words = analysis
        .source
        .surface_words
        .iter()
        .zip(a.per_word_scores.iter().zip(&a.highlighted))
        .map(|(text, (&uncertainty, &highlighted))| SourceWord { text: text.clone(), uncertainty, highlighted })
        .collect();
    Ok(Json(TranslateResponse {
        v: API_VERSION,
        translation: analysis.translation.text,
        source_words,
        threshold: state.threshold,
        model_id: state.loaded.checkpoint_id.clone().unwrap_or_default(),
        truncated: analysis.translation.truncated,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

async fn suggestions(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SuggestionsRequest>, JsonRejection>,
) -> Result<Json<SuggestionsResponse>, ApiError> {
    let start = Instant::now();
    let Json(req) = body?;
    let text = checked_text(&state, &req.text)?;
    let k = req.k.unwrap_or(state.config.k);
    if k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let checkpoint = model(&state)?;
    let index = state
        .loaded
        .index
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "suggestion index not loaded"))?;
    let sentence = checkpoint.tokenize(&text)?;
    if req.word_index >= sentence.num_words() {
        return Err(ApiError::bad_request(format!(
            "word_index {} is out of range for {} words",
            req.word_index,
            sentence.num_words()
        )));
    }
    let list = tokio::task::spawn_blocking(move || index.query_at(&checkpoint, &sentence, req.word_index, k))
        .await
        .map_err(ApiError::internal)??;
    if list.suggestions.is_empty() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no suggestions for {:?}", list.word)));
    }
    Ok(Json(SuggestionsResponse {
        v: API_VERSION,
        word: list.word,
        word_index: list.word_index,
        suggestions: list.suggestions,
        truncated: list.truncated,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> (StatusCode, Json<HealthResponse>) {
    let ready = state.loaded.checkpoint.is_some() && state.loaded.index.is_some();
    let body = HealthResponse {
        v: API_VERSION,
        status: if ready { "ok" } else { "unavailable" }.into(),
        model_id: state.loaded.checkpoint_id.clone(),
        index_id: state.loaded.index_id.clone(),
    };
    (if ready { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE }, Json(body))
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    if origins.is_empty() {
        return layer.allow_origin(AllowOrigin::any());
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
    layer.allow_origin(list)
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = cors(&state.config.cors_origins);
    Router::new()
        .route("/translate", post(translate))
        .route("/suggestions", post(suggestions))
        .route("/health", get(health))
        .layer(cors)
        .with_state(state)
}

/// Binds and serves until ctrl-c. `on_bound` receives the actual address.
pub async fn serve(state: AppState, on_bound: impl FnOnce(std::net::SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(state.config.bind).await?;
    on_bound(listener.local_addr()?);
    let app = router(Arc::new(state));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub fn checkpoint_dir(config: &ServiceConfig) -> Option<&Path> {
    config.checkpoint.as_deref()
}
