//! JSON-over-HTTP front end for the typing-study service.
//!
//! | method | path                          | body / query              | response        |
//! |--------|-------------------------------|---------------------------|-----------------|
//! | GET    | `/health`                     |                           | `{"status"}`    |
//! | POST   | `/sessions`                   | [`CreateSessionBody`]     | `Session`       |
//! | GET    | `/sessions/{id}`              |                           | `Session`       |
//! | GET    | `/sessions/{id}/next`         |                           | [`NextPrompt`]  |
//! | POST   | `/sessions/{id}/suggest`      | [`SuggestBody`]           | [`Suggestion`]  |
//! | POST   | `/sessions/{id}/events`       | [`EventBatch`]            | `BatchAck`      |
//! | GET    | `/sessions/{id}/log`          |                           | `SessionLog`    |
//! | GET    | `/analysis`                   | `?session=<id>` optional  | `StudyAnalysis` |
//!
//! Errors come back as `{"error": <kind>, "message": <text>}` with a 4xx/5xx
//! status.

use std::net::SocketAddr;
use std::sync::Arc;

use autocomplete_core::mdp::TimingConstants;
use autocomplete_core::study::analysis::{analyze, StudyAnalysis};
use autocomplete_core::study::{BatchAck, CreateSession, EventIn, PromptView, ServedSuggestion, Session, SessionLog, StudyService};
use autocomplete_core::Error;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

pub struct AppState {
    pub service: StudyService,
    /// Prompts used when a create request names none.
    pub default_prompts: Vec<String>,
    pub timing: TimingConstants,
    pub fatigue_bin: usize,
}

impl AppState {
    pub fn new(service: StudyService, default_prompts: Vec<String>) -> Self {
        AppState { service, default_prompts, timing: TimingConstants::default(), fatigue_bin: 25 }
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Session(_) => (StatusCode::CONFLICT, "session"),
            Error::Ordering(_) => (StatusCode::CONFLICT, "ordering"),
            Error::Contract(_) => (StatusCode::UNPROCESSABLE_ENTITY, "contract"),
            Error::Config(_) => (StatusCode::BAD_REQUEST, "config"),
            Error::Estimation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "estimation"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(ErrorBody { error: kind.into(), message: self.0.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionBody {
    pub participant: String,
    #[serde(default)]
    pub prompts: Option<Vec<String>>,
    #[serde(default)]
    pub policy: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NextPrompt {
    pub prompt: Option<PromptView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuggestBody {
    pub instance: usize,
    pub context: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Suggestion {
    pub suggestion: Option<ServedSuggestion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventBatch {
    pub events: Vec<EventIn>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AnalysisQuery {
    pub session: Option<String>,
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(State(st): State<Arc<AppState>>, Json(body): Json<CreateSessionBody>) -> ApiResult<Session> {
    let req = CreateSession {
        participant: body.participant,
        prompts: body.prompts.unwrap_or_else(|| st.default_prompts.clone()),
        policy: body.policy,
        seed: body.seed,
    };
    Ok(Json(st.service.create_session(&req)?))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Session> {
    Ok(Json(st.service.session(&id)?))
}

async fn next_prompt(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<NextPrompt> {
    Ok(Json(NextPrompt { prompt: st.service.next_prompt(&id)? }))
}

async fn suggest(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<SuggestBody>,
) -> ApiResult<Suggestion> {
    Ok(Json(Suggestion { suggestion: st.service.suggest(&id, body.instance, &body.context)? }))
}

async fn post_events(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<EventBatch>,
) -> ApiResult<BatchAck> {
    Ok(Json(st.service.record_events(&id, &body.events)?))
}

async fn get_log(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionLog> {
    Ok(Json(st.service.log(&id)?))
}

async fn analysis(State(st): State<Arc<AppState>>, Query(q): Query<AnalysisQuery>) -> ApiResult<StudyAnalysis> {
    let logs = match &q.session {
        Some(id) => vec![st.service.log(id)?],
        None => st.service.logs(),
    };
    let (timing, bin) = (st.timing, st.fatigue_bin);
    let result = tokio::task::spawn_blocking(move || analyze(&logs, &timing, bin))
        .await
        .map_err(|e| ApiError(Error::Session(format!("analysis task failed: {e}"))))??;
    Ok(Json(result))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_prompt))
        .route("/sessions/{id}/suggest", post(suggest))
        .route("/sessions/{id}/events", post(post_events))
        .route("/sessions/{id}/log", get(get_log))
        .route("/analysis", get(analysis))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
