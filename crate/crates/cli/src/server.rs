//! HTTP/JSON front end over a [`SessionStore`].
//!
//! | method | path                    | body            | reply          |
//! |--------|-------------------------|-----------------|----------------|
//! | POST   | `/sessions`             | `CreateSession` | `CreatedSession` (201) |
//! | GET    | `/sessions/{id}/query`  | `?atom=k`       | `QueryView`    |
//! | POST   | `/sessions/{id}/answer` | `AnswerRequest` | `AnswerView`   |
//! | GET    | `/sessions/{id}/state`  | `?atom=k`       | `StateView`    |
//! | DELETE | `/sessions/{id}`        |                 | `DeletedView`  |
//! | GET    | `/environment`          |                 | alternatives and grid |

use std::sync::{Arc, Mutex, MutexGuard};

use apa_core::harness::{AnswerRequest, CreateSession, SessionError, SessionStore};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

pub type SharedStore = Arc<Mutex<SessionStore>>;

/// JSON error body: `{"error": "..."}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub struct ApiError(StatusCode, String);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::Conflict(_) => StatusCode::CONFLICT,
            SessionError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::BadRequest(_) => StatusCode::BAD_REQUEST,
            SessionError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Default, Deserialize)]
pub struct AtomParam {
    pub atom: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnvironmentView {
    pub grid_k: usize,
    pub bounds: [[f64; 2]; 2],
    pub alternatives: Vec<[f64; 2]>,
}

fn lock(store: &SharedStore) -> MutexGuard<'_, SessionStore> {
    store.lock().unwrap_or_else(|p| p.into_inner())
}

async fn create(
    State(store): State<SharedStore>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<apa_core::harness::CreatedSession>), ApiError> {
    let Json(req) = body?;
    let created = lock(&store).create(&req)?;
    log::info!("session {} created ({:?})", created.id, created.mode);
    Ok((StatusCode::CREATED, Json(created)))
}

async fn query(
    State(store): State<SharedStore>,
    Path(id): Path<u64>,
    Query(p): Query<AtomParam>,
) -> ApiResult<apa_core::harness::QueryView> {
    Ok(Json(lock(&store).query(id, p.atom)?))
}

async fn answer(
    State(store): State<SharedStore>,
    Path(id): Path<u64>,
    body: Result<Json<AnswerRequest>, JsonRejection>,
) -> ApiResult<apa_core::harness::AnswerView> {
    let Json(req) = body?;
    Ok(Json(lock(&store).answer(id, &req)?))
}

async fn state(
    State(store): State<SharedStore>,
    Path(id): Path<u64>,
    Query(p): Query<AtomParam>,
) -> ApiResult<apa_core::harness::StateView> {
    Ok(Json(lock(&store).state(id, p.atom)?))
}

async fn delete(State(store): State<SharedStore>, Path(id): Path<u64>) -> ApiResult<apa_core::harness::DeletedView> {
    let deleted = lock(&store).delete(id)?;
    log::info!("session {id} deleted after {} answers", deleted.answers);
    Ok(Json(deleted))
}

async fn environment(State(store): State<SharedStore>) -> Json<EnvironmentView> {
    let store = lock(&store);
    let env = store.environment();
    Json(EnvironmentView {
        grid_k: env.grid.k,
        bounds: [env.grid.bounds.min, env.grid.bounds.max],
        alternatives: env.alternatives.iter().map(|a| a.position).collect(),
    })
}

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", axum::routing::delete(delete))
        .route("/sessions/{id}/query", get(query))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/state", get(state))
        .route("/environment", get(environment))
        .with_state(store)
}

/// Serves until Ctrl-C, then writes every live session's transcript.
pub async fn serve(store: SharedStore, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    let written = lock(&store).flush_all()?;
    log::info!("shutdown: wrote {} transcripts", written.len());
    Ok(())
}
