use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use crate::session::Submit;
use crate::{AnnotateError, Store};

/// Shared service state. Submissions take the write lock, so they are
/// applied one at a time; reads see a consistent snapshot.
#[derive(Clone)]
pub struct AppState {
    store: Arc<RwLock<Store>>,
}

impl AppState {
    pub fn new(store: Store) -> Self {
        Self { store: Arc::new(RwLock::new(store)) }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

struct ApiError(StatusCode, &'static str, String);

impl From<AnnotateError> for ApiError {
    fn from(e: AnnotateError) -> Self {
        let (status, code) = match &e {
            AnnotateError::UnknownAnnotator(_) => (StatusCode::UNAUTHORIZED, "unknown_annotator"),
            AnnotateError::NotOwner { .. } => (StatusCode::FORBIDDEN, "not_owner"),
            AnnotateError::Conflict(_) => (StatusCode::CONFLICT, "already_done"),
            AnnotateError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            AnnotateError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        ApiError(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { code: self.1, message: self.2 })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn poisoned() -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", "state lock poisoned".into())
}

/// A bearer token, when sent, must name the same annotator as the request.
fn check_bearer(headers: &HeaderMap, annotator: &str) -> ApiResult<()> {
    let Some(value) = headers.get(header::AUTHORIZATION) else {
        return Ok(());
    };
    let token = value.to_str().ok().and_then(|v| v.strip_prefix("Bearer ")).map(str::trim);
    match token {
        Some(t) if t == annotator => Ok(()),
        _ => Err(ApiError(
            StatusCode::UNAUTHORIZED,
            "unknown_annotator",
            "bearer token does not match the annotator".into(),
        )),
    }
}

#[derive(Serialize)]
struct SessionView<'a> {
    session_id: &'a str,
    seed: u64,
    roster: &'a [String],
    progress: crate::session::Progress,
}

async fn session(State(app): State<AppState>) -> ApiResult<Response> {
    let store = app.store.read().map_err(|_| poisoned())?;
    let s = store.state();
    Ok(Json(SessionView { session_id: &s.session_id, seed: s.seed, roster: &s.roster, progress: s.progress() })
        .into_response())
}

async fn next(State(app): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    check_bearer(&headers, &id)?;
    let store = app.store.read().map_err(|_| poisoned())?;
    Ok(match store.state().next_task(&id)? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit(
    State(app): State<AppState>,
    Path(task_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let req: Submit = serde_json::from_slice(&body)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, "bad_request", format!("invalid submission body: {e}")))?;
    check_bearer(&headers, &req.annotator_id)?;
    let mut store = app.store.write().map_err(|_| poisoned())?;
    let record = store.submit(&task_id, &req)?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn progress(State(app): State<AppState>) -> ApiResult<Response> {
    let store = app.store.read().map_err(|_| poisoned())?;
    Ok(Json(store.state().progress()).into_response())
}

async fn export(State(app): State<AppState>) -> ApiResult<Response> {
    let store = app.store.read().map_err(|_| poisoned())?;
    let text = laffi_core::corpus::to_jsonl(&store.state().export())
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

const PLACEHOLDER: &str = "<!doctype html><title>laffi annotate</title>\
<p>No UI bundle configured. The API lives under <code>/api</code>.</p>";

/// API routes plus static files from `static_dir` (or a placeholder page).
pub fn router(app: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session", get(session))
        .route("/api/annotators/{id}/next", get(next))
        .route("/api/tasks/{id}/feedback", post(submit))
        .route("/api/progress", get(progress))
        .route("/api/export", get(export))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

pub async fn serve(addr: SocketAddr, app: AppState, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, app, static_dir).await
}

/// Serves on an already-bound listener until ctrl-c.
pub async fn serve_on(listener: TcpListener, app: AppState, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    log::info!("annotation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
