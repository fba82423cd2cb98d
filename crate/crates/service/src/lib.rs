//! Analysis service: one POST runs tag classification, detection and (for
//! tampered verdicts) localization, and stores the result as a session that
//! later follow-up questions continue.
//!
//! ```text
//! POST /analyze                  multipart, field "image"
//! GET  /sessions/{id}
//! GET  /sessions/{id}/mask       image/png
//! POST /sessions/{id}/follow_up  {"question": "..."}
//! GET  /healthz
//! ```
//!
//! Errors are `{"code", "message"}` with a matching status.

mod model;
mod session;
mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex, Weak};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::multipart::MultipartError;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tamperscope_core::imaging::{decode_image, encode_mask_png};
use tokio::sync::Semaphore;

pub use model::ForensicModel;
pub use session::{
    AnalysisResult, AnalyzeResponse, Detection, ErrorBody, FollowUpRequest, FollowUpResponse, SessionRecord, SessionStatus, SessionView, TurnRecord,
};
pub use store::{SessionStore, StoreError};

/// The `[service]` section of the project configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub ttl_secs: u64,
    /// Time an analysis may take before `POST /analyze` answers with a
    /// pending session instead.
    pub deadline_secs: f64,
    pub max_upload_bytes: usize,
    /// Model computations running at once; further requests queue.
    pub max_in_flight: usize,
    pub sweep_interval_secs: u64,
    /// Origin allowed to call the API from a browser, `*` for any.
    pub allow_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            ttl_secs: 24 * 3600,
            deadline_secs: 60.0,
            max_upload_bytes: 20 << 20,
            max_in_flight: 8,
            sweep_interval_secs: 3600,
            allow_origin: None,
        }
    }
}

impl ServiceConfig {
    /// Reads the `[service]` table of a TOML file; other tables are ignored.
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        #[derive(Deserialize)]
        struct File {
            #[serde(default)]
            service: ServiceConfig,
        }
        toml::from_str::<File>(text).map(|f| f.service)
    }
}

/// Seconds since the Unix epoch; replaceable for tests.
pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

pub struct AppState {
    model: Option<Arc<dyn ForensicModel>>,
    store: Arc<SessionStore>,
    config: ServiceConfig,
    clock: Clock,
    permits: Arc<Semaphore>,
    session_locks: Mutex<HashMap<String, Weak<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    /// `model` is `None` when no weights are loaded; model endpoints then
    /// answer 503.
    pub fn new(model: Option<Arc<dyn ForensicModel>>, store: SessionStore, config: ServiceConfig, clock: Clock) -> Arc<Self> {
        let permits = Arc::new(Semaphore::new(config.max_in_flight.max(1)));
        Arc::new(Self { model, store: Arc::new(store), config, clock, permits, session_locks: Mutex::new(HashMap::new()) })
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    fn expired(&self, record: &SessionRecord) -> bool {
        (self.clock)() >= record.created_at.saturating_add(self.config.ttl_secs)
    }

    /// Live session or 404.
    fn session(&self, id: &str) -> Result<SessionRecord, ApiError> {
        match self.store.get(id)? {
            Some(rec) if !self.expired(&rec) => Ok(rec),
            _ => Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"))),
        }
    }

    fn session_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.session_locks.lock().expect("session lock table");
        if let Some(lock) = locks.get(id).and_then(Weak::upgrade) {
            return lock;
        }
        locks.retain(|_, w| w.strong_count() > 0);
        let lock = Arc::new(tokio::sync::Mutex::new(()));
        locks.insert(id.to_string(), Arc::downgrade(&lock));
        lock
    }

    /// Removes expired sessions and unreferenced blobs.
    pub fn sweep(&self) -> Result<usize, StoreError> {
        self.store.sweep(|r| self.expired(r))
    }

    fn model(&self) -> Result<Arc<dyn ForensicModel>, ApiError> {
        self.model.clone().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", "no model is loaded"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into() } }
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        tracing::error!(%message, "internal error");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self::internal(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    // Room for the multipart framing around the file itself.
    let body_limit = state.config.max_upload_bytes + (64 << 10);
    let mut router = Router::new()
        .route("/analyze", post(analyze))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/mask", get(get_mask))
        .route("/sessions/{id}/follow_up", post(follow_up))
        .route("/healthz", get(healthz))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .layer(DefaultBodyLimit::max(body_limit));
    if let Some(origin) = &state.config.allow_origin {
        use tower_http::cors::{AllowOrigin, Any, CorsLayer};
        let allow = if origin == "*" {
            AllowOrigin::any()
        } else {
            AllowOrigin::exact(HeaderValue::from_str(origin).expect("allow_origin is a valid header value"))
        };
        router = router.layer(CorsLayer::new().allow_origin(allow).allow_methods(Any).allow_headers(Any));
    }
    router.with_state(state)
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    model_loaded: bool,
    model_versions: Option<tamperscope_core::pipeline::ModelVersions>,
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health { status: "ok", model_loaded: state.model.is_some(), model_versions: state.model.as_ref().map(|m| m.versions()) })
}

fn multipart_error(e: MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", e.body_text())
    } else {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_multipart", e.body_text())
    }
}

/// Bytes of the `image` field, or of the only field when unnamed.
async fn read_upload(mut multipart: Multipart, limit: usize) -> Result<Vec<u8>, ApiError> {
    let mut found = None;
    while let Some(field) = multipart.next_field().await.map_err(multipart_error)? {
        let named_image = field.name() == Some("image");
        if found.is_some() && !named_image {
            continue;
        }
        let bytes = field.bytes().await.map_err(multipart_error)?;
        found = Some(bytes.to_vec());
        if named_image {
            break;
        }
    }
    let bytes = found.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_image", "the form has no image field"))?;
    if bytes.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_upload", "the uploaded image is empty"));
    }
    if bytes.len() > limit {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", format!("images are limited to {limit} bytes")));
    }
    Ok(bytes)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

async fn analyze(State(state): State<Arc<AppState>>, multipart: Multipart) -> Result<Response, ApiError> {
    let model = state.model()?;
    let bytes = read_upload(multipart, state.config.max_upload_bytes).await?;
    let (image, bytes) = blocking(move || (decode_image(&bytes), bytes)).await?;
    let image = image.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", e.to_string()))?;

    let store = state.store.clone();
    let image_ref = blocking(move || store.put_blob(&bytes)).await??;
    let record = SessionRecord {
        session_id: uuid::Uuid::new_v4().to_string(),
        status: SessionStatus::Pending,
        created_at: (state.clock)(),
        image_ref,
        model_versions: model.versions(),
        result: None,
        error: None,
        turns: Vec::new(),
    };
    let store = state.store.clone();
    let pending = record.clone();
    blocking(move || store.put(&pending)).await??;
    let id = record.session_id.clone();

    // The job owns everything it needs and finishes even when the request
    // stops waiting at the deadline.
    let job = {
        let state = state.clone();
        let lock = state.session_lock(&id);
        tokio::spawn(async move {
            let _session = lock.lock_owned().await;
            let _permit = state.permits.clone().acquire_owned().await.expect("semaphore is never closed");
            let store = state.store.clone();
            blocking(move || run_analysis(&*model, &store, record, &image)).await?
        })
    };
    let deadline = Duration::from_secs_f64(state.config.deadline_secs.max(0.0));
    match tokio::time::timeout(deadline, job).await {
        Ok(joined) => {
            let record = joined.map_err(ApiError::internal)??;
            if record.status == SessionStatus::Failed {
                let message = record.error.unwrap_or_default();
                return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "analysis_failed", message));
            }
            Ok((StatusCode::OK, Json(AnalyzeResponse::from_record(&record))).into_response())
        }
        Err(_) => Ok((StatusCode::ACCEPTED, Json(AnalyzeResponse::pending(id))).into_response()),
    }
}

/// Runs the pipeline and persists the finished (or failed) session.
fn run_analysis(model: &dyn ForensicModel, store: &SessionStore, mut record: SessionRecord, image: &image::RgbImage) -> Result<SessionRecord, ApiError> {
    match model.analyze(image) {
        Ok(analysis) => {
            let mask_ref = match &analysis.mask {
                Some(mask) => Some(store.put_blob(&encode_mask_png(&mask.binary))?),
                None => None,
            };
            record.result = Some(AnalysisResult::new(&analysis, mask_ref));
            record.status = SessionStatus::Complete;
        }
        Err(e) => {
            tracing::error!(session = %record.session_id, error = %e, "analysis failed");
            record.error = Some(e.to_string());
            record.status = SessionStatus::Failed;
        }
    }
    store.put(&record)?;
    Ok(record)
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let record = state.session(&id)?;
    let expires_at = record.created_at.saturating_add(state.config.ttl_secs);
    Ok(Json(SessionView { record, expires_at }))
}

fn completed(record: &SessionRecord) -> Result<&AnalysisResult, ApiError> {
    match (&record.status, &record.result) {
        (SessionStatus::Complete, Some(result)) => Ok(result),
        (SessionStatus::Failed, _) => Err(ApiError::new(StatusCode::CONFLICT, "analysis_failed", record.error.clone().unwrap_or_default())),
        _ => Err(ApiError::new(StatusCode::CONFLICT, "pending", "the analysis is still running")),
    }
}

async fn get_mask(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let record = state.session(&id)?;
    let result = completed(&record)?;
    let Some(mask_ref) = result.mask_ref.clone() else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "no_mask", "the verdict is authentic, so no mask was produced"));
    };
    let store = state.store.clone();
    let png = blocking(move || store.blob(&mask_ref)).await??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn follow_up(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<FollowUpRequest>, JsonRejection>,
) -> Result<Json<FollowUpResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    let question = req.question.trim().to_string();
    if question.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_question", "the question is empty"));
    }
    let model = state.model()?;
    completed(&state.session(&id)?)?;
    let lock = state.session_lock(&id);
    let _session = lock.lock_owned().await;
    // Re-read under the lock: an earlier follow-up may have added turns.
    let mut record = state.session(&id)?;
    let result = completed(&record)?.clone();
    if record.model_versions != model.versions() {
        return Err(ApiError::new(StatusCode::CONFLICT, "model_changed", "the session was analysed by models that are no longer loaded"));
    }
    let _permit = state.permits.clone().acquire_owned().await.expect("semaphore is never closed");
    let store = state.store.clone();
    let image_ref = record.image_ref.clone();
    let turns = record.text_turns();
    let q = question.clone();
    let answer = blocking(move || -> Result<String, ApiError> {
        let image = decode_image(&store.blob(&image_ref)?).map_err(ApiError::internal)?;
        model.follow_up(&image, &result.domain_tag, &result.opening_turn(), &turns, &q).map_err(ApiError::internal)
    })
    .await??;
    record.turns.push(TurnRecord { question, answer: answer.clone(), timestamp: (state.clock)() });
    let store = state.store.clone();
    let saved = record.clone();
    blocking(move || store.put(&saved)).await??;
    Ok(Json(FollowUpResponse { session_id: id, answer, turns: record.turns.len() }))
}

/// Serves until Ctrl-C, sweeping expired sessions periodically.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, model_loaded = state.model.is_some(), "serving");
    let sweeper = {
        let state = state.clone();
        let every = Duration::from_secs(state.config.sweep_interval_secs.max(1));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let s = state.clone();
                match tokio::task::spawn_blocking(move || s.sweep()).await {
                    Ok(Ok(n)) if n > 0 => tracing::info!(removed = n, "expired sessions removed"),
                    Ok(Err(e)) => tracing::warn!(error = %e, "sweep failed"),
                    _ => {}
                }
            }
        })
    };
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    sweeper.abort();
    result
}

/// Opens the store under `data_dir` and builds the state.
pub fn open(model: Option<Arc<dyn ForensicModel>>, data_dir: &Path, config: ServiceConfig) -> Result<Arc<AppState>, StoreError> {
    Ok(AppState::new(model, SessionStore::open(data_dir)?, config, system_clock()))
}
