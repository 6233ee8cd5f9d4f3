//! HTTP API over the store, the generation engine and the live relay.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use tower::ServiceExt;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::{ServeDir, ServeFile};

use crate::chain::ChainError;
use crate::context::ContextError;
use crate::engine::{Engine, GenerateError, GenerateParams};
use crate::gateway::GatewayError;
use crate::library::{list_sessions, read_manifest, LibraryError, SessionFiles, FRAMES_DIR};
use crate::media::parse_frame_name;
use crate::prompt::TemplateError;
use crate::relay::{Outbound, Relay, RelayError, Role};
use crate::session::{is_valid_session_id, path_stays_within, Decision};
use crate::store::{write_atomic, StoreError};

#[derive(Clone)]
pub struct AppState {
    pub relay: Arc<Relay>,
}

impl AppState {
    pub fn engine(&self) -> &Engine {
        self.relay.engine()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ApiOptions {
    pub cors_origin: Option<String>,
    pub console_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            detail: None,
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", what)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"code": self.code, "message": self.message});
        if let Some(d) = self.detail {
            body["detail"] = d;
        }
        (self.status, Json(body)).into_response()
    }
}

pub fn gateway_code(e: &GatewayError) -> &'static str {
    match e {
        GatewayError::InvalidRequest(_) => "InvalidRequest",
        GatewayError::AuthError(_) => "AuthError",
        GatewayError::ProviderUnavailable(_) => "ProviderUnavailable",
        GatewayError::PayloadTooLarge => "PayloadTooLarge",
        GatewayError::MalformedResponse(_) => "MalformedResponse",
        GatewayError::Image { .. } => "ImageUnreadable",
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let status = match e {
            GatewayError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            GatewayError::PayloadTooLarge => StatusCode::PAYLOAD_TOO_LARGE,
            GatewayError::Image { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_GATEWAY,
        };
        ApiError::new(status, gateway_code(&e), e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, code) = match &e {
            StoreError::UnknownSession(_) => (StatusCode::NOT_FOUND, "UnknownSession"),
            StoreError::UnknownMessage(_) => (StatusCode::NOT_FOUND, "UnknownMessage"),
            StoreError::EmptyDenialReason => (StatusCode::BAD_REQUEST, "DenyWithoutReason"),
            StoreError::AlreadyDecided { .. } => (StatusCode::CONFLICT, "AlreadyDecided"),
            StoreError::ScoreOutOfRange(_) => (StatusCode::BAD_REQUEST, "ScoreOutOfRange"),
            StoreError::EmptyLabel => (StatusCode::BAD_REQUEST, "EmptyLabel"),
            StoreError::NotApproved(_) => (StatusCode::CONFLICT, "NotApproved"),
            StoreError::DuplicateMessage(_) => (StatusCode::CONFLICT, "DuplicateMessage"),
            StoreError::InvalidMessage(_) => (StatusCode::BAD_REQUEST, "InvalidMessage"),
            StoreError::Corrupt { .. } | StoreError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "StoreError"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<LibraryError> for ApiError {
    fn from(e: LibraryError) -> Self {
        match e {
            LibraryError::UnknownSession(id) => {
                ApiError::new(StatusCode::NOT_FOUND, "UnknownSession", format!("unknown session `{id}`"))
            }
            LibraryError::Store(s) => s.into(),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "SessionUnreadable", other.to_string()),
        }
    }
}

impl From<TemplateError> for ApiError {
    fn from(e: TemplateError) -> Self {
        match e {
            TemplateError::UnknownPlaceholder(_) => ApiError::new(StatusCode::BAD_REQUEST, "UnknownPlaceholder", e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "TemplateError", e.to_string()),
        }
    }
}

impl From<GenerateError> for ApiError {
    fn from(e: GenerateError) -> Self {
        match e {
            GenerateError::Context(ContextError::TimestampOutOfRange { .. }) => {
                ApiError::new(StatusCode::BAD_REQUEST, "TimestampOutOfRange", e.to_string())
            }
            GenerateError::Context(ContextError::Template(t)) => t.into(),
            GenerateError::Context(c) => ApiError::bad_request(c.to_string()),
            GenerateError::Chain(ChainError::UnparseablePhase { raw }) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "UnparseablePhase",
                message: "classification output has no recognizable phase".into(),
                detail: Some(json!({ "raw": raw })),
            },
            GenerateError::Chain(ChainError::EmptyGeneration) => {
                ApiError::new(StatusCode::BAD_GATEWAY, "EmptyGeneration", "model returned no text")
            }
            GenerateError::Chain(ChainError::Gateway(g)) => g.into(),
            GenerateError::Chain(c) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "ChainError", c.to_string()),
            GenerateError::Store(s) => s.into(),
            GenerateError::Library(l) => l.into(),
            GenerateError::Template(t) => t.into(),
        }
    }
}

impl From<RelayError> for ApiError {
    fn from(e: RelayError) -> Self {
        match e {
            RelayError::UnknownSession(_) => ApiError::new(StatusCode::NOT_FOUND, "UnknownSession", e.to_string()),
            RelayError::Closed(_) => ApiError::new(StatusCode::CONFLICT, "SessionClosed", e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "RelayError", e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(relay: Arc<Relay>, options: &ApiOptions) -> Router {
    let state = AppState { relay };
    let mut app = Router::new()
        .route("/api/sessions", get(sessions))
        .route("/api/sessions/{id}", get(session))
        .route("/api/sessions/{id}/transcript", get(transcript))
        .route("/api/sessions/{id}/generate", post(generate))
        .route("/api/sessions/{id}/messages", get(messages))
        .route("/api/sessions/{id}/coding-view", get(coding_view))
        .route("/api/sessions/{id}/export.csv", get(export_csv))
        .route("/api/messages/{id}/rating", post(rate))
        .route("/api/messages/{id}/annotation", post(annotate))
        .route("/api/messages/{id}/decision", post(decide))
        .route("/api/live", post(create_live))
        .route("/api/live/{id}/close", post(close_live))
        .route("/api/live/{id}/events", get(live_events))
        .route("/media/{id}/video", get(video))
        .route("/media/{id}/frames/{name}", get(frame).put(upload_frame))
        .route("/ws/{id}", get(ws))
        .layer(DefaultBodyLimit::max(32 * 1024 * 1024))
        .with_state(state);
    if let Some(dir) = &options.console_dir {
        app = app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true));
    }
    if let Some(origin) = &options.cors_origin {
        let cors = CorsLayer::new()
            .allow_methods([Method::GET, Method::POST, Method::PUT])
            .allow_headers(Any);
        let cors = if origin == "*" {
            cors.allow_origin(Any)
        } else {
            match HeaderValue::from_str(origin) {
                Ok(v) => cors.allow_origin(v),
                Err(_) => cors,
            }
        };
        app = app.layer(cors);
    }
    app.layer(middleware::from_fn(log_request))
}

async fn log_request(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let started = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        "{method} {path} {} {}ms",
        resp.status().as_u16(),
        started.elapsed().as_millis()
    );
    resp
}

fn session_dir(state: &AppState, id: &str) -> ApiResult<PathBuf> {
    if !is_valid_session_id(id) || !state.engine().store.ensure_session(id) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "UnknownSession", format!("unknown session `{id}`")));
    }
    Ok(state.engine().store.session_dir(id))
}

async fn sessions(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let root = state.engine().store.root().to_path_buf();
    let mut listing = tokio::task::spawn_blocking(move || list_sessions(&root))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Io", e.to_string()))?;
    listing.warnings.extend(state.engine().store.warnings());
    Ok(Json(json!(listing)))
}

async fn session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let dir = session_dir(&state, &id)?;
    let files = SessionFiles::load(&dir)?;
    let violations = files.violations();
    Ok(Json(json!({
        "manifest": files.manifest,
        "frames": files.frames.frames(),
        "brief": files.brief,
        "warnings": files.frame_warnings,
        "violations": violations,
        "live": state.relay.handle(&id).is_some(),
    })))
}

async fn transcript(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let dir = session_dir(&state, &id)?;
    let files = SessionFiles::load(&dir)?;
    Ok(Json(json!(files.utterances)))
}

async fn generate(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(params): Json<GenerateParams>,
) -> ApiResult<Json<Value>> {
    session_dir(&state, &id)?;
    let generated = state.engine().generate(&id, &params).await?;
    Ok(Json(json!(generated)))
}

#[derive(Deserialize)]
struct LimitQuery {
    limit: Option<usize>,
}

async fn messages(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<LimitQuery>,
) -> ApiResult<Json<Value>> {
    session_dir(&state, &id)?;
    let mut msgs = state.engine().store.messages(&id)?;
    if let Some(limit) = q.limit {
        msgs.truncate(limit);
    }
    Ok(Json(json!(msgs)))
}

async fn coding_view(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<LimitQuery>,
) -> ApiResult<Json<Value>> {
    session_dir(&state, &id)?;
    let mut rows = state.engine().store.coding_view(&id)?;
    if let Some(limit) = q.limit {
        rows.truncate(limit);
    }
    Ok(Json(json!(rows)))
}

async fn export_csv(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    session_dir(&state, &id)?;
    let csv = state.engine().store.export_csv(&id)?;
    Ok(([(axum::http::header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

#[derive(Deserialize)]
struct RatingBody {
    score: i64,
    #[serde(default)]
    comment: Option<String>,
    #[serde(default)]
    rater: Option<String>,
}

async fn rate(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<RatingBody>,
) -> ApiResult<Json<Value>> {
    let rater = b.rater.unwrap_or_else(|| "console".to_string());
    let rating = state.engine().store.rate(&id, b.score, b.comment, &rater)?;
    Ok(Json(json!(rating)))
}

#[derive(Deserialize)]
struct AnnotationBody {
    label: String,
    #[serde(default)]
    note: Option<String>,
}

async fn annotate(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<AnnotationBody>,
) -> ApiResult<Json<Value>> {
    let a = state.engine().store.annotate(&id, &b.label, b.note)?;
    Ok(Json(json!(a)))
}

#[derive(Deserialize)]
struct DecisionBody {
    decision: String,
    #[serde(default)]
    reason: Option<String>,
}

async fn decide(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<DecisionBody>,
) -> ApiResult<Json<Value>> {
    let decision = match b.decision.as_str() {
        "approved" => Decision::Approved,
        "denied" => match b.reason.filter(|r| !r.trim().is_empty()) {
            Some(reason) => Decision::Denied { reason },
            None => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "DenyWithoutReason",
                    "a denial needs a non-empty reason",
                ))
            }
        },
        other => return Err(ApiError::bad_request(format!("unknown decision `{other}`"))),
    };
    let msg = state.engine().store.set_decision(&id, decision)?;
    Ok(Json(json!(msg)))
}

#[derive(Deserialize, Default)]
struct LiveBody {
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    brief: Option<String>,
}

async fn create_live(State(state): State<AppState>, body: Option<Json<LiveBody>>) -> ApiResult<Response> {
    let b = body.map(|Json(b)| b).unwrap_or_default();
    let manifest = state
        .relay
        .create_live(b.title, b.brief)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "LiveCreateFailed", e.to_string()))?;
    Ok((StatusCode::CREATED, Json(json!(manifest))).into_response())
}

async fn close_live(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let manifest = state.relay.close_live(&id).await?;
    Ok(Json(json!(manifest)))
}

async fn live_events(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let handle = state
        .relay
        .handle(&id)
        .ok_or_else(|| ApiError::from(RelayError::UnknownSession(id.clone())))?;
    Ok(Json(json!(handle.events().await?)))
}

async fn serve_file(path: PathBuf, req: Request) -> ApiResult<Response> {
    if !path.is_file() {
        return Err(ApiError::not_found(format!(
            "no file `{}`",
            path.file_name().unwrap_or_default().to_string_lossy()
        )));
    }
    match ServeFile::new(path).oneshot(req).await {
        Ok(resp) => Ok(resp.into_response()),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Io", e.to_string())),
    }
}

async fn video(State(state): State<AppState>, Path(id): Path<String>, req: Request) -> ApiResult<Response> {
    let dir = session_dir(&state, &id)?;
    let manifest = read_manifest(&dir)?;
    let uri = manifest
        .video_uri
        .filter(|u| path_stays_within("", u))
        .ok_or_else(|| ApiError::not_found(format!("session `{id}` has no video")))?;
    serve_file(dir.join(uri), req).await
}

fn frame_path(state: &AppState, id: &str, name: &str) -> ApiResult<PathBuf> {
    let dir = session_dir(state, id)?;
    if parse_frame_name(name).is_none() {
        return Err(ApiError::not_found(format!("`{name}` is not a frame file name")));
    }
    let frames_dir = read_manifest(&dir).map(|m| m.frames_dir).unwrap_or_else(|_| FRAMES_DIR.to_string());
    Ok(dir.join(frames_dir).join(name))
}

async fn frame(
    State(state): State<AppState>,
    Path((id, name)): Path<(String, String)>,
    req: Request,
) -> ApiResult<Response> {
    let path = frame_path(&state, &id, &name)?;
    serve_file(path, req).await
}

async fn upload_frame(
    State(state): State<AppState>,
    Path((id, name)): Path<(String, String)>,
    body: axum::body::Bytes,
) -> ApiResult<Response> {
    let path = frame_path(&state, &id, &name)?;
    let open = match state.relay.handle(&id) {
        Some(h) => h.is_open().await,
        None => false,
    };
    if !open {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "NotLive",
            format!("session `{id}` does not accept frame uploads"),
        ));
    }
    let len = body.len();
    tokio::task::spawn_blocking(move || write_atomic(&path, &body))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Io", e.to_string()))?;
    Ok((StatusCode::CREATED, Json(json!({"name": name, "byte_len": len}))).into_response())
}

#[derive(Deserialize)]
struct WsQuery {
    role: Role,
    #[serde(default)]
    resume: Option<String>,
}

async fn ws(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<WsQuery>,
    upgrade: WebSocketUpgrade,
) -> ApiResult<Response> {
    let handle = state
        .relay
        .handle(&id)
        .ok_or_else(|| ApiError::from(RelayError::UnknownSession(id.clone())))?;
    Ok(upgrade.on_upgrade(move |socket| serve_socket(handle, q.role, q.resume, socket)))
}

async fn serve_socket(handle: crate::relay::LiveHandle, role: Role, resume: Option<String>, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
    let admitted = match handle.connect(role, resume, tx).await {
        Ok(Ok(a)) => a,
        Ok(Err(rejection)) => {
            let _ = sink.send(WsMessage::Text(rejection.into())).await;
            let _ = sink.send(WsMessage::Close(None)).await;
            return;
        }
        Err(_) => {
            let _ = sink.send(WsMessage::Close(None)).await;
            return;
        }
    };
    let writer = tokio::spawn(async move {
        while let Some(out) = rx.recv().await {
            match out {
                Outbound::Frame(text) => {
                    if sink.send(WsMessage::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Outbound::Close => {
                    let _ = sink.send(WsMessage::Close(None)).await;
                    break;
                }
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            WsMessage::Text(text) => handle.inbound(admitted.conn_id, role, text.to_string()),
            WsMessage::Close(_) => break,
            _ => {}
        }
        if writer.is_finished() {
            break;
        }
    }
    handle.disconnect(admitted.conn_id, role);
    writer.abort();
}
