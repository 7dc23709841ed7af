//! `/v1` HTTP+JSON API.

use std::collections::BTreeMap;
use std::sync::Arc;

use anchorage_core::anchors::AnchorKind;
use anchorage_core::engine::EngineMode;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use crate::runtime::{Runtime, ServiceError, DEFAULT_SESSION};

pub type AppState = Arc<Runtime>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut body = json!({ "error": self.code(), "message": self.to_string() });
        if let ServiceError::Backend { fallback, .. } = &self {
            body["fallback"] = json!(fallback);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

fn parse_kind(kind: &str) -> ApiResult<AnchorKind> {
    kind.parse()
        .map_err(|_| ServiceError::BadRequest(format!("unknown anchor kind {kind:?}")))
}

pub fn router(runtime: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/agents", get(list_agents).post(create_agent))
        .route("/v1/agents/{agent}", get(get_agent))
        .route("/v1/agents/{agent}/fork", post(fork_agent))
        .route("/v1/agents/{agent}/chat", post(chat))
        .route("/v1/agents/{agent}/anchors", get(list_anchors))
        .route("/v1/agents/{agent}/anchors/{kind}", get(get_anchor).put(put_anchor))
        .route("/v1/agents/{agent}/baseline", post(baseline))
        .route("/v1/agents/{agent}/drift", post(drift))
        .route("/v1/agents/{agent}/failures", post(failures))
        .route("/v1/agents/{agent}/routes", get(routes))
        .route("/v1/agents/{agent}/memory", get(memory))
        .route("/v1/agents/{agent}/sessions", get(sessions))
        .with_state(runtime)
}

async fn health(State(rt): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "backend": rt.engine().backend().name(),
        "mode": rt.config().mode,
        "agents": rt.agent_ids().len(),
    }))
}

async fn list_agents(State(rt): State<AppState>) -> ApiResult<Json<Vec<crate::runtime::AgentInfo>>> {
    let mut out = Vec::new();
    for id in rt.agent_ids() {
        let guard = rt.lock(&id).await?;
        out.push(rt.info(&guard));
    }
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
struct CreateAgent {
    agent_id: String,
    /// Anchor texts keyed by slug or file name.
    #[serde(default)]
    anchors: BTreeMap<String, String>,
}

async fn create_agent(State(rt): State<AppState>, Json(body): Json<CreateAgent>) -> ApiResult<impl IntoResponse> {
    let texts = body
        .anchors
        .iter()
        .map(|(k, v)| Ok((parse_kind(k)?, v.clone())))
        .collect::<ApiResult<BTreeMap<_, _>>>()?;
    let info = blocking(move || rt.create_agent(&body.agent_id, &texts)).await?;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn get_agent(State(rt): State<AppState>, Path(agent): Path<String>) -> ApiResult<impl IntoResponse> {
    let guard = rt.lock(&agent).await?;
    Ok(Json(rt.info(&guard)))
}

#[derive(Debug, Deserialize)]
struct ForkBody {
    new_agent_id: String,
}

async fn fork_agent(
    State(rt): State<AppState>,
    Path(agent): Path<String>,
    Json(body): Json<ForkBody>,
) -> ApiResult<impl IntoResponse> {
    let guard = rt.lock(&agent).await?;
    let info = blocking(move || rt.fork_agent(&guard, &body.new_agent_id)).await?;
    Ok((StatusCode::CREATED, Json(info)))
}

#[derive(Debug, Deserialize)]
struct ChatBody {
    #[serde(default)]
    session_id: Option<String>,
    message: String,
    #[serde(default)]
    mode: Option<EngineMode>,
}

async fn chat(
    State(rt): State<AppState>,
    Path(agent): Path<String>,
    Json(body): Json<ChatBody>,
) -> ApiResult<impl IntoResponse> {
    let mut guard = rt.lock(&agent).await?;
    let session = body.session_id.unwrap_or_else(|| DEFAULT_SESSION.to_string());
    let reply = blocking(move || rt.chat(&mut guard, &session, &body.message, body.mode)).await?;
    Ok(Json(reply))
}

async fn list_anchors(State(rt): State<AppState>, Path(agent): Path<String>) -> ApiResult<impl IntoResponse> {
    let guard = rt.lock(&agent).await?;
    Ok(Json(guard.set.summaries()))
}

async fn get_anchor(
    State(rt): State<AppState>,
    Path((agent, kind)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    let kind = parse_kind(&kind)?;
    let guard = rt.lock(&agent).await?;
    let text = rt.anchor_text(&guard, kind);
    Ok(([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], text))
}

async fn put_anchor(
    State(rt): State<AppState>,
    Path((agent, kind)): Path<(String, String)>,
    body: String,
) -> ApiResult<impl IntoResponse> {
    let kind = parse_kind(&kind)?;
    let mut guard = rt.lock(&agent).await?;
    let detail = blocking(move || rt.put_anchor(&mut guard, kind, &body)).await?;
    Ok(Json(detail))
}

async fn baseline(State(rt): State<AppState>, Path(agent): Path<String>) -> ApiResult<impl IntoResponse> {
    let mut guard = rt.lock(&agent).await?;
    let hash = blocking(move || rt.take_baseline(&mut guard)).await?;
    Ok(Json(hash))
}

async fn drift(State(rt): State<AppState>, Path(agent): Path<String>) -> ApiResult<impl IntoResponse> {
    let mut guard = rt.lock(&agent).await?;
    let report = blocking(move || rt.drift(&mut guard)).await?;
    Ok(Json(report))
}

#[derive(Debug, Deserialize)]
struct FailureBody {
    kind: String,
    enabled: bool,
}

async fn failures(
    State(rt): State<AppState>,
    Path(agent): Path<String>,
    Json(body): Json<FailureBody>,
) -> ApiResult<impl IntoResponse> {
    let kind = parse_kind(&body.kind)?;
    let mut guard = rt.lock(&agent).await?;
    let info = blocking(move || rt.set_failure(&mut guard, kind, body.enabled)).await?;
    Ok(Json(info))
}

#[derive(Debug, Deserialize)]
struct Page {
    #[serde(default)]
    offset: Option<usize>,
    #[serde(default)]
    limit: Option<usize>,
}

async fn routes(
    State(rt): State<AppState>,
    Path(agent): Path<String>,
    Query(page): Query<Page>,
) -> ApiResult<impl IntoResponse> {
    let guard = rt.lock(&agent).await?;
    Ok(Json(rt.routes(&guard, page.limit.unwrap_or(50))))
}

async fn memory(
    State(rt): State<AppState>,
    Path(agent): Path<String>,
    Query(page): Query<Page>,
) -> ApiResult<impl IntoResponse> {
    let guard = rt.lock(&agent).await?;
    Ok(Json(rt.memory(&guard, page.offset.unwrap_or(0), page.limit.unwrap_or(usize::MAX))))
}

async fn sessions(State(rt): State<AppState>, Path(agent): Path<String>) -> ApiResult<impl IntoResponse> {
    let guard = rt.lock(&agent).await?;
    Ok(Json(rt.sessions(&guard)))
}

/// Bind `addr` and serve until ctrl-c. `on_bound` receives the actual
/// address (useful with port 0).
pub async fn serve(
    runtime: AppState,
    addr: std::net::SocketAddr,
    on_bound: impl FnOnce(std::net::SocketAddr),
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(runtime))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
