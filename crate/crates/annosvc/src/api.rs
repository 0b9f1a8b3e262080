//! HTTP routes.
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | GET | `/api/tasks/next` | `?annotator=ID` | [`NextTask`] |
//! | POST | `/api/votes` | [`VoteEvent`] | `{"status":"ok","duplicate":bool}` |
//! | GET | `/api/export` | | JSONL of `PreferenceRecord` |
//! | GET | `/api/progress` | | [`Progress`] |
//!
//! Errors are `{"error": message}` with 400 for malformed input and 404 for
//! unknown pairs.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::store::{load_pairs, NextTask, Progress, Store, StoreError, VoteEvent};

pub type SharedStore = Arc<Mutex<Store>>;

pub struct ApiError(StoreError);

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            StoreError::UnknownPair(_) => StatusCode::NOT_FOUND,
            StoreError::InvalidVote(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

fn bad_request(message: impl Into<String>) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

fn lock(store: &SharedStore) -> std::sync::MutexGuard<'_, Store> {
    store.lock().unwrap_or_else(|p| p.into_inner())
}

async fn next_task(State(store): State<SharedStore>, Query(q): Query<NextQuery>) -> Result<Json<NextTask>, Response> {
    let Some(annotator) = q.annotator else {
        return Err(bad_request("missing query parameter: annotator"));
    };
    lock(&store).next_task(&annotator).map(Json).map_err(|e| ApiError(e).into_response())
}

async fn submit_vote(State(store): State<SharedStore>, body: Bytes) -> Response {
    let event: VoteEvent = match serde_json::from_slice(&body) {
        Ok(e) => e,
        Err(e) => return bad_request(format!("malformed vote: {e}")),
    };
    match lock(&store).submit(&event) {
        Ok(ack) => Json(json!({ "status": "ok", "duplicate": ack.duplicate })).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn export(State(store): State<SharedStore>) -> Response {
    let body = prefcap_core::jsonl::to_jsonl_string(&lock(&store).export());
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

async fn progress(State(store): State<SharedStore>) -> Json<Progress> {
    Json(lock(&store).progress())
}

/// API routes, plus optional static directories: `audio_dir` under
/// `/audio` and `static_dir` as the fallback for everything else.
pub fn router(store: SharedStore, static_dir: Option<PathBuf>, audio_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/votes", post(submit_vote))
        .route("/api/export", get(export))
        .route("/api/progress", get(progress))
        .with_state(store);
    if let Some(dir) = audio_dir {
        app = app.nest_service("/audio", ServeDir::new(dir));
    }
    if let Some(dir) = static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub pairs: PathBuf,
    pub log: PathBuf,
    pub addr: SocketAddr,
    pub order_seed: u64,
    pub static_dir: Option<PathBuf>,
    pub audio_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server error: {0}")]
    Server(std::io::Error),
}

/// Loads the pool, replays the log and serves until Ctrl-C.
pub async fn serve(cfg: ServeConfig) -> Result<(), ServeError> {
    let pairs = load_pairs(&cfg.pairs)?;
    let store = Store::open(pairs, &cfg.log, cfg.order_seed)?;
    let p = store.progress();
    tracing::info!(pairs = p.pairs, votes = p.votes, log = %cfg.log.display(), "vote log replayed");
    let app = router(Arc::new(Mutex::new(store)), cfg.static_dir, cfg.audio_dir);
    let listener =
        tokio::net::TcpListener::bind(cfg.addr).await.map_err(|source| ServeError::Bind { addr: cfg.addr, source })?;
    tracing::info!(addr = %cfg.addr, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServeError::Server)
}
