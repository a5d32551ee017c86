//! HTTP front for the review book: queue, verdict submission, progress and
//! export under `/api/v1`, plus static files for the annotation UI.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgadv::review::{Decision, ItemKind, Progress, QueueFilter, ResolvedExport, ReviewBook, ReviewItem, Verdict, VerdictLog};
use kgadv::template::ReviewStatus;
use kgadv::Error;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

/// Shared state. The mutex serializes log appends; reads see a consistent
/// snapshot of the book.
pub struct ReviewState {
    book: Mutex<ReviewBook>,
    log: VerdictLog,
}

impl ReviewState {
    pub fn new(book: ReviewBook, log: VerdictLog) -> Arc<Self> {
        Arc::new(ReviewState { book: Mutex::new(book), log })
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
struct QueueParams {
    kind: Option<ItemKind>,
    status: Option<ReviewStatus>,
}

async fn queue(State(state): State<Arc<ReviewState>>, Query(params): Query<QueueParams>) -> Json<Vec<ReviewItem>> {
    let filter = QueueFilter { kind: params.kind, status: params.status };
    Json(state.book.lock().await.queue(&filter))
}

async fn item(State(state): State<Arc<ReviewState>>, Path(id): Path<String>) -> Result<Json<ReviewItem>, ApiError> {
    state.book.lock().await.item(&id).map(Json).ok_or_else(|| Error::NotFound(id).into())
}

async fn progress(State(state): State<Arc<ReviewState>>) -> Json<Progress> {
    Json(state.book.lock().await.progress())
}

async fn export(State(state): State<Arc<ReviewState>>) -> Json<ResolvedExport> {
    Json(state.book.lock().await.export_resolved())
}

/// Verdict body; the annotator comes from the header.
#[derive(Debug, Deserialize)]
pub struct VerdictRequest {
    pub item_id: String,
    #[serde(flatten)]
    pub decision: Decision,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerdictResponse {
    pub item: ReviewItem,
    /// False when the idempotency key had already been recorded.
    pub recorded: bool,
}

async fn verdict(
    State(state): State<Arc<ReviewState>>,
    headers: HeaderMap,
    Json(req): Json<VerdictRequest>,
) -> Result<Json<VerdictResponse>, ApiError> {
    let annotator = headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, format!("missing {ANNOTATOR_HEADER} header")))?;
    let timestamp_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or_default();
    let v = Verdict {
        annotator_id: annotator.to_string(),
        item_id: req.item_id,
        decision: req.decision,
        timestamp_ms,
        idempotency_key: req.idempotency_key,
    };
    let mut book = state.book.lock().await;
    // persist before applying so the in-memory book never runs ahead of the log
    if book.validate(&v)? {
        state.log.append(&v)?;
    }
    let (item, recorded) = book.submit(v)?;
    Ok(Json(VerdictResponse { item, recorded }))
}

pub fn router(state: Arc<ReviewState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/queue", get(queue))
        .route("/verdict", post(verdict))
        .route("/item/{id}", get(item))
        .route("/progress", get(progress))
        .route("/export", get(export))
        .with_state(state);
    let app = Router::new().nest("/api/v1", api);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

pub async fn serve(addr: SocketAddr, state: Arc<ReviewState>, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "review service listening");
    axum::serve(listener, router(state, ui_dir)).await
}
