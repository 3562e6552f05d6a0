//! HTTP API under `/api/v1`, plus the background worker pool.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use i2e_core::metrics::Grouping;
use i2e_core::{load_rubric, parse, ExpertAnnotation, Meta, RubricError, Scale};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::mpsc;

use crate::pipeline::{OverrideRequest, Pipeline, PipelineError, Upload, UploadPayload};
use crate::report::{efficiency_block, render_text};
use crate::state::RunOptions;
use crate::store::{RAW_TRANSCRIPT, REFINED_TRANSCRIPT};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), details: Value::Null }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", message)
    }

    fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message, "details": self.details}});
        (self.status, Json(body)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let message = e.to_string();
        match e {
            PipelineError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", message),
            PipelineError::Conflict(_) => ApiError::new(StatusCode::CONFLICT, "conflict", message),
            PipelineError::Malformed { path, .. } => ApiError::bad_request(message).with_details(json!({ "path": path })),
            PipelineError::Unprocessable(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", message),
            PipelineError::KeyMismatch(i2e_core::metrics::AgreementError::KeyMismatch { only_model, only_human, unknown }) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "key_mismatch", message)
                    .with_details(json!({"only_model": only_model, "only_human": only_human, "unknown": unknown}))
            }
            PipelineError::KeyMismatch(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "key_mismatch", message),
            PipelineError::Store(_) | PipelineError::Internal(_) => {
                tracing::error!(%message, "internal error");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
            }
        }
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        let status = e.status();
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE { "payload_too_large" } else { "malformed_request" };
        ApiError::new(status, code, e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub queue: mpsc::UnboundedSender<String>,
    pub bearer_token: Option<String>,
}

/// Spawns `workers` tasks that run queued sessions to completion.
pub fn start_workers(pipeline: Arc<Pipeline>, workers: usize) -> mpsc::UnboundedSender<String> {
    let (tx, rx) = mpsc::unbounded_channel::<String>();
    let rx = Arc::new(tokio::sync::Mutex::new(rx));
    for _ in 0..workers.max(1) {
        let rx = rx.clone();
        let pipeline = pipeline.clone();
        tokio::spawn(async move {
            loop {
                let next = rx.lock().await.recv().await;
                let Some(id) = next else { break };
                let p = pipeline.clone();
                let result = tokio::task::spawn_blocking(move || p.execute(&id)).await;
                match result {
                    Ok(Ok(state)) => tracing::info!(state = state.label(), "session finished"),
                    Ok(Err(e)) => tracing::error!(error = %e, "session execution error"),
                    Err(e) => tracing::error!(error = %e, "worker panicked"),
                }
            }
        });
    }
    tx
}

/// Re-queues sessions a previous process left mid-pipeline.
pub fn recover(state: &AppState) -> Result<usize, PipelineError> {
    let ids = state.pipeline.recover()?;
    let n = ids.len();
    for id in ids {
        let _ = state.queue.send(id);
    }
    Ok(n)
}

pub fn router(state: AppState, max_upload_bytes: usize) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/run", post(run_session))
        .route("/sessions/:id/status", get(session_status))
        .route("/sessions/:id/report", get(session_report))
        .route("/sessions/:id/report.txt", get(session_report_text))
        .route("/sessions/:id/transcript", get(session_transcript))
        .route("/sessions/:id/overrides", get(list_overrides))
        .route("/sessions/:id/indicators/:indicator_id/override", post(override_indicator))
        .route("/rubrics", get(list_rubrics))
        .route("/rubrics/:scale", get(get_rubric).put(put_rubric))
        .route("/metrics/agreement", post(compute_agreement))
        .route("/stats", get(stats))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(|| async { Json(json!({"status": "ok"})) }))
        .nest("/api/v1", api)
        .layer(DefaultBodyLimit::max(max_upload_bytes))
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.bearer_token {
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn audio_extension(filename: Option<&str>) -> String {
    filename
        .and_then(|f| std::path::Path::new(f).extension())
        .and_then(|e| e.to_str())
        .filter(|e| !e.is_empty() && e.len() <= 8 && e.chars().all(|c| c.is_ascii_alphanumeric()))
        .unwrap_or("bin")
        .to_ascii_lowercase()
}

async fn create_session(State(state): State<AppState>, headers: HeaderMap, mut form: Multipart) -> ApiResult<Response> {
    let mut upload = Upload {
        session_id: None,
        idempotency_key: headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_owned),
        classroom_meta: Meta::new(),
        duration_ms: None,
        payload: UploadPayload::Transcript(Vec::new()),
    };
    let mut payload = None;
    while let Some(field) = form.next_field().await? {
        let name = field.name().unwrap_or_default().to_owned();
        let filename = field.file_name().map(str::to_owned);
        let bytes = field.bytes().await?;
        let text = || String::from_utf8(bytes.to_vec()).map_err(|_| ApiError::bad_request(format!("field {name} is not UTF-8")));
        match name.as_str() {
            "transcript" | "audio" if payload.is_some() => {
                return Err(ApiError::bad_request("send exactly one of transcript or audio"))
            }
            "transcript" => payload = Some(UploadPayload::Transcript(bytes.to_vec())),
            "audio" => payload = Some(UploadPayload::Audio { extension: audio_extension(filename.as_deref()), bytes: bytes.to_vec() }),
            "classroom_meta" => {
                upload.classroom_meta = parse(&bytes).map_err(|e| {
                    ApiError::bad_request(format!("classroom_meta: {}", e.message)).with_details(json!({"path": e.path}))
                })?
            }
            "session_id" => upload.session_id = Some(text()?.trim().to_owned()),
            "idempotency_key" => upload.idempotency_key = Some(text()?.trim().to_owned()),
            "duration_ms" => {
                upload.duration_ms =
                    Some(text()?.trim().parse().map_err(|_| ApiError::bad_request("duration_ms must be an integer"))?)
            }
            other => return Err(ApiError::bad_request(format!("unexpected field {other}"))),
        }
    }
    upload.payload = payload.ok_or_else(|| ApiError::bad_request("missing transcript or audio field"))?;
    let pipeline = state.pipeline.clone();
    let outcome = blocking(move || Ok(pipeline.create_session(upload)?)).await?;
    let status = if outcome.created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(outcome)).into_response())
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let p = state.pipeline.clone();
    blocking(move || {
        let mut out = Vec::new();
        for id in p.store().list_sessions().map_err(PipelineError::from)? {
            let job = p.store().job(&id).map_err(PipelineError::from)?;
            out.push(json!({"session_id": id, "state": job.state.label()}));
        }
        Ok(Json(Value::Array(out)))
    })
    .await
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let p = state.pipeline.clone();
    blocking(move || {
        let meta = p.store().meta(&id).map_err(PipelineError::from)?;
        let status = p.status(&id)?;
        let job = p.store().job(&id).map_err(PipelineError::from)?;
        Ok(Json(json!({
            "session": meta.session,
            "input": meta.input,
            "job": status,
            "options": job.options,
            "artifacts": status.artifacts,
            "overrides": p.overrides(&id)?,
        })))
    })
    .await
}

async fn run_session(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let options: RunOptions = if body.iter().all(u8::is_ascii_whitespace) {
        RunOptions::default()
    } else {
        parse(&body).map_err(|e| ApiError::bad_request(e.message.clone()).with_details(json!({"path": e.path})))?
    };
    let p = state.pipeline.clone();
    let sid = id.clone();
    let job_state = blocking(move || Ok(p.request_run(&sid, options)?)).await?;
    state
        .queue
        .send(id.clone())
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutting_down", "worker pool is closed"))?;
    Ok((StatusCode::ACCEPTED, Json(json!({"session_id": id, "state": job_state.label()}))).into_response())
}

async fn session_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let p = state.pipeline.clone();
    let view = blocking(move || Ok(p.status(&id)?)).await?;
    Ok(Json(view).into_response())
}

async fn session_report(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let p = state.pipeline.clone();
    blocking(move || {
        let (report, job) = p.report(&id)?;
        let mut body = serde_json::to_value(&report).map_err(|e| PipelineError::Internal(e.to_string()))?;
        body["efficiency"] = serde_json::to_value(efficiency_block(&job)).unwrap_or(Value::Null);
        Ok(Json(body))
    })
    .await
}

async fn session_report_text(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let p = state.pipeline.clone();
    let text = blocking(move || Ok(render_text(&p.report(&id)?.0))).await?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}

#[derive(Debug, Deserialize)]
struct TranscriptQuery {
    kind: Option<String>,
}

async fn session_transcript(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<TranscriptQuery>,
) -> ApiResult<Response> {
    let p = state.pipeline.clone();
    let bytes = blocking(move || {
        p.store().job(&id).map_err(PipelineError::from)?;
        let names: &[&str] = match q.kind.as_deref() {
            None => &[REFINED_TRANSCRIPT, RAW_TRANSCRIPT],
            Some("raw") => &[RAW_TRANSCRIPT],
            Some("refined") => &[REFINED_TRANSCRIPT],
            Some(k) => return Err(ApiError::bad_request(format!("kind must be raw or refined, got {k}"))),
        };
        for name in names {
            if let Some(b) = p.store().artifact_bytes(&id, name).map_err(PipelineError::from)? {
                return Ok(b);
            }
        }
        Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", "transcript not available yet"))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn list_overrides(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let p = state.pipeline.clone();
    blocking(move || {
        p.store().job(&id).map_err(PipelineError::from)?;
        Ok(Json(serde_json::to_value(p.overrides(&id)?).unwrap_or_default()))
    })
    .await
}

async fn override_indicator(
    State(state): State<AppState>,
    Path((id, indicator_id)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let req: OverrideRequest =
        parse(&body).map_err(|e| ApiError::bad_request(e.message.clone()).with_details(json!({"path": e.path})))?;
    let p = state.pipeline.clone();
    blocking(move || Ok(Json(serde_json::to_value(p.apply_override(&id, &indicator_id, req)?).unwrap_or_default()))).await
}

fn parse_scale(s: &str) -> ApiResult<Scale> {
    s.parse().map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown scale {s}")))
}

async fn list_rubrics(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let p = state.pipeline.clone();
    blocking(move || {
        let rubrics = p.store().rubrics().map_err(PipelineError::from)?;
        let out: Vec<Value> = rubrics
            .iter()
            .map(|r| {
                json!({
                    "scale": r.scale,
                    "version": r.version,
                    "items": r.items.len(),
                    "indicators": r.indicators().count(),
                    "accessible_indicators": r.accessible_indicators().count(),
                })
            })
            .collect();
        Ok(Json(Value::Array(out)))
    })
    .await
}

async fn get_rubric(State(state): State<AppState>, Path(scale): Path<String>) -> ApiResult<Response> {
    let scale = parse_scale(&scale)?;
    let p = state.pipeline.clone();
    let rubric = blocking(move || Ok(p.store().rubric(scale).map_err(PipelineError::from)?)).await?;
    match rubric {
        Some(r) => Ok(Json(r).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no rubric stored for {scale}"))),
    }
}

async fn put_rubric(State(state): State<AppState>, Path(scale): Path<String>, body: Bytes) -> ApiResult<Response> {
    let scale = parse_scale(&scale)?;
    let rubric = load_rubric(&body).map_err(|e| match e {
        RubricError::Parse(p) => ApiError::bad_request(p.message.clone()).with_details(json!({"path": p.path})),
        RubricError::InvariantViolation(v) => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "rubric_invalid", "rubric violates invariants")
                .with_details(json!({ "violations": v }))
        }
    })?;
    if rubric.scale != scale {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "scale_mismatch",
            format!("rubric is for {}, not {scale}", rubric.scale),
        ));
    }
    let p = state.pipeline.clone();
    let summary = json!({"scale": rubric.scale, "version": rubric.version});
    blocking(move || Ok(p.store().put_rubric(&rubric).map_err(PipelineError::from)?)).await?;
    Ok((StatusCode::OK, Json(summary)).into_response())
}

#[derive(Debug, Deserialize)]
struct AgreementRequest {
    session_id: String,
    annotation: ExpertAnnotation,
    #[serde(default)]
    group_by: Option<String>,
}

async fn compute_agreement(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: AgreementRequest =
        parse(&body).map_err(|e| ApiError::bad_request(e.message.clone()).with_details(json!({"path": e.path})))?;
    let grouping = match req.group_by.as_deref() {
        None | Some("dimension") => Grouping::Dimension,
        Some("scale") => Grouping::Scale,
        Some(g) => return Err(ApiError::bad_request(format!("group_by must be dimension or scale, got {g}"))),
    };
    if req.annotation.session_id != req.session_id {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "unprocessable",
            "annotation.session_id differs from session_id",
        ));
    }
    let p = state.pipeline.clone();
    blocking(move || {
        let report = p.agreement(&req.session_id, &req.annotation, grouping)?;
        Ok(Json(serde_json::to_value(report).unwrap_or_default()))
    })
    .await
}

async fn stats(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let p = state.pipeline.clone();
    blocking(move || Ok(Json(serde_json::to_value(p.stats()?).unwrap_or_default()))).await
}

/// Serves until the listener fails; recovers interrupted sessions first.
pub async fn serve(
    listener: tokio::net::TcpListener,
    pipeline: Arc<Pipeline>,
    workers: usize,
    max_upload_bytes: usize,
    bearer_token: Option<String>,
) -> std::io::Result<()> {
    let queue = start_workers(pipeline.clone(), workers);
    let state = AppState { pipeline, queue, bearer_token };
    match recover(&state) {
        Ok(0) => {}
        Ok(n) => tracing::info!(sessions = n, "resuming interrupted sessions"),
        Err(e) => tracing::error!(error = %e, "recovery scan failed"),
    }
    axum::serve(listener, router(state, max_upload_bytes)).await
}
