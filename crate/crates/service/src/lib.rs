//! Network front end for a loaded knowledge graph and agent.
//!
//! [`router`] exposes the store queries, observation, single questions and
//! batch evaluation as JSON over HTTP. [`lines`] serves the plain-text
//! `NEIGHBORS` / `PATHS` protocol over TCP.

pub mod api;
pub mod lines;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgscout_core::agent::{self, AgentConfig, Providers};
use kgscout_core::eval::{run_eval, EvalOptions, MatchPolicy};
use kgscout_core::observation::observe;
use kgscout_core::{EntityId, KnowledgeGraph};
use tokio::net::TcpListener;

pub use api::*;

/// Shared, immutable server state.
#[derive(Clone)]
pub struct AppState {
    pub kg: Arc<KnowledgeGraph>,
    pub providers: Providers,
    pub config: Arc<AgentConfig>,
    pub match_policy: MatchPolicy,
    pub default_workers: usize,
}

impl AppState {
    pub fn new(kg: KnowledgeGraph, providers: Providers, config: AgentConfig) -> Self {
        Self {
            kg: Arc::new(kg),
            providers,
            config: Arc::new(config),
            match_policy: MatchPolicy::Normalized,
            default_workers: 4,
        }
    }
}

/// A JSON error reply.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn entity(id: &str) -> Result<EntityId, ApiError> {
    EntityId::new(id).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        triples: s.kg.len(),
        labels: s.kg.label_count(),
    })
}

async fn neighbors(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<NeighborsQuery>,
) -> ApiResult<Vec<kgscout_core::Triple>> {
    let id = entity(&id)?;
    Ok(Json(s.kg.get_neighbors(id.as_str(), q.limit)))
}

async fn paths(State(s): State<AppState>, Query(q): Query<PathsQuery>) -> ApiResult<Vec<Vec<kgscout_core::Triple>>> {
    let (from, to) = (entity(&q.from)?, entity(&q.to)?);
    let max_len = q.max_len.unwrap_or(s.config.path_max_len);
    if max_len == 0 || max_len > MAX_PATH_LEN {
        return Err(ApiError::bad_request(format!("max_len must be in 1..={MAX_PATH_LEN}")));
    }
    let kg = s.kg.clone();
    let found = blocking(move || kg.find_paths(from.as_str(), to.as_str(), max_len)).await?;
    Ok(Json(found))
}

async fn inspect(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<NeighborsQuery>,
) -> ApiResult<EntityReport> {
    let id = entity(&id)?;
    Ok(Json(EntityReport::build(&s.kg, &id, q.limit)))
}

async fn observe_handler(State(s): State<AppState>, Json(req): Json<ObserveRequest>) -> ApiResult<kgscout_core::ObservationSubgraph> {
    let params = req.params.unwrap_or_else(|| s.config.observation.clone());
    params.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    if req.entities.is_empty() {
        return Err(ApiError::bad_request("entities is empty"));
    }
    let sub = blocking(move || observe(&s.kg, &req.question, &req.entities, &params, &s.providers.embedder))
        .await?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(sub))
}

async fn ask(State(s): State<AppState>, Json(req): Json<AskRequest>) -> ApiResult<AskResponse> {
    if req.question.trim().is_empty() {
        return Err(ApiError::bad_request("question is empty"));
    }
    if req.entities.is_empty() {
        return Err(ApiError::bad_request("entities is empty"));
    }
    let mut config = (*s.config).clone();
    if let Some(strategy) = req.strategy {
        config.reflection.strategy = strategy;
    }
    let reply = blocking(move || match agent::run(&req.question, &req.entities, &s.kg, &s.providers, &config) {
        Ok(r) => AskResponse {
            answers: r.answers,
            halted_by: Some(r.halted_by),
            error: None,
            trace: r.trace,
        },
        Err(f) => AskResponse {
            answers: Vec::new(),
            halted_by: None,
            error: Some(f.error.to_string()),
            trace: *f.trace,
        },
    })
    .await?;
    Ok(Json(reply))
}

async fn eval(State(s): State<AppState>, Json(req): Json<EvalRequest>) -> ApiResult<kgscout_core::EvalReport> {
    for (i, r) in req.records.iter().enumerate() {
        r.validate().map_err(|m| ApiError::bad_request(format!("record {i}: {m}")))?;
    }
    let mut config = (*s.config).clone();
    if let Some(strategy) = req.strategy {
        config.reflection.strategy = strategy;
    }
    let options = EvalOptions {
        workers: req.workers.unwrap_or(s.default_workers).max(1),
        match_policy: req.match_policy.unwrap_or(s.match_policy),
        out_dir: None,
    };
    let report = blocking(move || run_eval(&req.records, &s.kg, &s.providers, &config, &options))
        .await?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(report))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/neighbors/{id}", get(neighbors))
        .route("/paths", get(paths))
        .route("/entities/{id}", get(inspect))
        .route("/observe", post(observe_handler))
        .route("/ask", post(ask))
        .route("/eval", post(eval))
        .with_state(state)
}

/// Serves HTTP on `listener` until `shutdown` resolves.
pub async fn serve_http(
    listener: TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds and serves on an ephemeral local port, returning its address.
/// The server runs until the runtime shuts down.
pub async fn spawn_local(state: AppState) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(("127.0.0.1", 0)).await?;
    let addr = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve_http(listener, state, std::future::pending()).await {
            tracing::error!(error = %e, "http server stopped");
        }
    });
    Ok(addr)
}
