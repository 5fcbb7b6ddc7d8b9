//! HTTP service for interactive, stage-by-stage runs.
//!
//! Each session owns one [`Run`]. Stage requests on a session are serialized:
//! a request that finds the session busy gets `409 stage in progress` instead
//! of waiting. Reads of persisted artifacts and manifests go to the store and
//! keep working after a session is closed.

use std::collections::HashMap;
use std::future::Future;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use lsid_core::artifacts::{ArtifactError, ArtifactKind, ArtifactStore, RunManifest, MANIFEST_FILE};
use lsid_core::backends::BackendKind;
use lsid_core::maskops::RgbImage;
use lsid_core::pipeline::{
    ConfigPatch, GateDecision, PipelineError, Run, RunConfig, RunRequest, Stage, StageStatus,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex as AsyncMutex;

use crate::cli::BackendFactory;

pub const DEFAULT_IDLE_LIMIT: Duration = Duration::from_secs(30 * 60);
const GC_INTERVAL: Duration = Duration::from_secs(60);
const MAX_UPLOAD: usize = 64 * 1024 * 1024;

struct Session {
    run: Arc<AsyncMutex<Run>>,
    created_at: SystemTime,
    last_activity: Mutex<Instant>,
}

impl Session {
    fn touch(&self) {
        *self.last_activity.lock().unwrap() = Instant::now();
    }

    fn idle_since(&self) -> Instant {
        *self.last_activity.lock().unwrap()
    }
}

/// Snapshot of one open session.
#[derive(Debug, Clone, Serialize)]
pub struct SessionRecord {
    pub run_id: String,
    pub created_at: SystemTime,
    pub idle: Duration,
    pub busy: bool,
}

struct Inner {
    store: ArtifactStore,
    backend: BackendKind,
    factory: BackendFactory,
    idle_limit: Duration,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(store: ArtifactStore, backend: BackendKind, factory: BackendFactory) -> Self {
        Self(Arc::new(Inner {
            store,
            backend,
            factory,
            idle_limit: DEFAULT_IDLE_LIMIT,
            sessions: Mutex::new(HashMap::new()),
        }))
    }

    /// Only meaningful before the state is shared.
    pub fn with_idle_limit(self, limit: Duration) -> Self {
        let inner = Arc::try_unwrap(self.0).unwrap_or_else(|_| panic!("state already shared"));
        Self(Arc::new(Inner {
            idle_limit: limit,
            ..inner
        }))
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.0.store
    }

    pub fn sessions(&self) -> Vec<SessionRecord> {
        let now = Instant::now();
        let mut out: Vec<SessionRecord> = self
            .0
            .sessions
            .lock()
            .unwrap()
            .iter()
            .map(|(id, s)| SessionRecord {
                run_id: id.clone(),
                created_at: s.created_at,
                idle: now.saturating_duration_since(s.idle_since()),
                busy: s.run.try_lock().is_err(),
            })
            .collect();
        out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        out
    }

    /// Close sessions idle longer than the limit at `now`, finalizing their
    /// manifests. Busy sessions are left alone. Returns how many closed.
    pub fn session_gc(&self, now: Instant) -> usize {
        let mut sessions = self.0.sessions.lock().unwrap();
        let expired: Vec<String> = sessions
            .iter()
            .filter(|(_, s)| now.saturating_duration_since(s.idle_since()) > self.0.idle_limit)
            .map(|(id, _)| id.clone())
            .collect();
        let mut closed = 0;
        for id in expired {
            let Ok(mut run) = sessions[&id].run.clone().try_lock_owned() else {
                continue;
            };
            if let Err(e) = run.finalize() {
                log::warn!("finalizing {id}: {e}");
            }
            drop(run);
            sessions.remove(&id);
            closed += 1;
        }
        closed
    }

    fn session(&self, run_id: &str) -> Result<Arc<Session>, ApiError> {
        self.0
            .sessions
            .lock()
            .unwrap()
            .get(run_id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_run(run_id))
    }

    fn scrub(&self, message: String) -> String {
        scrub_paths(&message, self.0.store.root())
    }

    fn pipeline_error(&self, e: PipelineError) -> ApiError {
        let mut err = ApiError::from(e);
        err.message = self.scrub(err.message);
        err
    }
}

fn scrub_paths(message: &str, root: &Path) -> String {
    let mut out = message.to_string();
    for form in [root.to_string_lossy().into_owned(), root.canonicalize().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default()] {
        if !form.is_empty() {
            out = out.replace(&form, "<store>");
        }
    }
    out
}

/// A typed JSON error body: `{"error": code, "message": ..., ...details}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: Value::Null,
        }
    }

    fn with(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad-request", message)
    }

    fn unknown_run(run_id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown-run", format!("no open run {run_id}"))
    }

    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "busy", "stage in progress")
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let message = e.to_string();
        match e {
            PipelineError::Input(_) | PipelineError::Config(_) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid", message)
            }
            PipelineError::Ordering { stage, requires } => Self::new(StatusCode::CONFLICT, "ordering", message)
                .with(json!({ "stage": stage, "requires": requires })),
            PipelineError::DownstreamLive { stage, blocking } => {
                Self::new(StatusCode::CONFLICT, "downstream-live", message)
                    .with(json!({ "stage": stage, "blocking": blocking }))
            }
            PipelineError::NothingToReview { stage, .. } => {
                Self::new(StatusCode::CONFLICT, "nothing-to-review", message).with(json!({ "stage": stage }))
            }
            PipelineError::Finalized(_) => Self::new(StatusCode::CONFLICT, "finalized", message),
            PipelineError::Signal { stage, signal } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "signal", message)
                .with(json!({ "stage": stage, "signal": signal.as_str() })),
            PipelineError::Backend { stage, .. } => {
                Self::new(StatusCode::BAD_GATEWAY, "backend", message).with(json!({ "stage": stage }))
            }
            PipelineError::Artifact(_) | PipelineError::Mask(_) | PipelineError::Geometry(_) => {
                Self::internal(message)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Value::Object(extra) = self.details {
            body.as_object_mut().unwrap().extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize)]
pub struct StageView {
    pub stage: Stage,
    pub status: StageStatus,
    pub revision: u32,
    pub gate: Option<GateDecision>,
    pub seconds: Option<f64>,
    pub message: Option<String>,
    pub runnable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactView {
    pub kind: ArtifactKind,
    pub revision: u32,
    pub path: String,
    /// Run-relative URL.
    pub url: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Client view of a run, built from its manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RunView {
    pub run_id: String,
    pub phrase: String,
    pub edit_prompt: String,
    pub config: RunConfig,
    pub open: bool,
    pub busy: bool,
    pub finalized: bool,
    pub stages: Vec<StageView>,
    pub retained_detections: Option<usize>,
    pub signal: Option<String>,
    pub semantic_overlap: Option<f64>,
    pub notices: Vec<String>,
    pub artifacts: Vec<ArtifactView>,
    pub content_fingerprint: String,
}

impl RunView {
    fn build(m: &RunManifest, runnable: &[Stage], open: bool, busy: bool) -> Self {
        RunView {
            run_id: m.run_id.clone(),
            phrase: m.phrase.clone(),
            edit_prompt: m.edit_prompt.clone(),
            config: m.config.clone(),
            open,
            busy,
            finalized: m.is_finalized(),
            stages: m
                .stages
                .iter()
                .map(|r| StageView {
                    stage: r.stage,
                    status: r.status,
                    revision: r.revision,
                    gate: r.gate,
                    seconds: r.seconds,
                    message: r.message.clone(),
                    runnable: runnable.contains(&r.stage),
                })
                .collect(),
            retained_detections: m.retained_detections,
            signal: m.signal.clone(),
            semantic_overlap: m.semantic_overlap,
            notices: m.notices.clone(),
            artifacts: m
                .artifacts
                .iter()
                .map(|e| ArtifactView {
                    kind: e.kind,
                    revision: e.revision,
                    path: e.path.clone(),
                    url: format!("artifacts/{}?revision={}", e.kind, e.revision),
                    sha256: e.sha256.clone(),
                    bytes: e.bytes,
                })
                .collect(),
            content_fingerprint: m.content_fingerprint.clone(),
        }
    }

    fn of_run(run: &Run) -> Self {
        let runnable = if run.manifest().is_finalized() { Vec::new() } else { run.state().runnable_stages() };
        Self::build(run.manifest(), &runnable, true, false)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/runs", post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/stages/{stage}", post(run_stage))
        .route("/runs/{id}/config", patch(patch_config))
        .route("/runs/{id}/accept/{stage}", post(accept_stage))
        .route("/runs/{id}/reject/{stage}", post(reject_stage))
        .route("/runs/{id}/artifacts/{kind}", get(get_artifact))
        .route("/runs/{id}/manifest", get(get_manifest))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

/// Serve until `shutdown` resolves. Idle sessions are collected once a
/// minute.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let gc_state = state.clone();
    let gc = tokio::spawn(async move {
        let mut tick = tokio::time::interval(GC_INTERVAL);
        loop {
            tick.tick().await;
            let closed = gc_state.session_gc(Instant::now());
            if closed > 0 {
                log::info!("closed {closed} idle session(s)");
            }
        }
    });
    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    gc.abort();
    result
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "backend": state.0.backend,
        "sessions": state.0.sessions.lock().unwrap().len(),
    }))
}

async fn create_run(State(state): State<AppState>, mut multipart: Multipart) -> ApiResult<Response> {
    let mut image = None;
    let mut phrase = None;
    let mut prompt = None;
    let mut patch = ConfigPatch::default();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        let text = || String::from_utf8(data.to_vec()).map_err(|_| ApiError::bad_request(format!("{name} is not UTF-8")));
        match name.as_str() {
            "image" => image = Some(data.clone()),
            "phrase" => phrase = Some(text()?),
            "prompt" => prompt = Some(text()?),
            "config" => {
                patch = serde_json::from_slice(&data).map_err(|e| ApiError::bad_request(format!("config: {e}")))?
            }
            other => return Err(ApiError::bad_request(format!("unexpected field '{other}'"))),
        }
    }
    let missing = |f: &str| ApiError::bad_request(format!("missing field '{f}'"));
    let image = image.ok_or_else(|| missing("image"))?;
    let phrase = phrase.ok_or_else(|| missing("phrase"))?;
    let prompt = prompt.ok_or_else(|| missing("prompt"))?;
    if let Some(kind) = patch.backend_set {
        if kind != state.0.backend {
            return Err(ApiError::bad_request(format!(
                "this service runs the {} backend set",
                state.0.backend
            )));
        }
    }
    let mut config = RunConfig::default().patched(&patch).map_err(|e| state.pipeline_error(e))?;
    config.backend_set = state.0.backend;

    let worker = state.clone();
    let run = tokio::task::spawn_blocking(move || -> ApiResult<Run> {
        let image = RgbImage::from_png(&image).map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
        let backends = (worker.0.factory)();
        Run::start(worker.0.store.clone(), backends, RunRequest::new(image, phrase, prompt, config))
            .map_err(|e| worker.pipeline_error(e))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;

    let view = RunView::of_run(&run);
    let run_id = run.run_id().to_string();
    state.0.sessions.lock().unwrap().insert(
        run_id.clone(),
        Arc::new(Session {
            run: Arc::new(AsyncMutex::new(run)),
            created_at: SystemTime::now(),
            last_activity: Mutex::new(Instant::now()),
        }),
    );
    Ok((StatusCode::CREATED, Json(json!({ "run_id": run_id, "state": view }))).into_response())
}

fn parse_stage(s: &str) -> ApiResult<Stage> {
    s.parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "unknown-stage", format!("no stage '{s}'")))
}

fn load_manifest(state: &AppState, id: &str) -> ApiResult<RunManifest> {
    state.0.store.load_run_manifest(id).map_err(|e| match e {
        ArtifactError::InvalidRunId(_) | ArtifactError::UnknownRun(_) | ArtifactError::MissingManifest(_) => {
            ApiError::new(StatusCode::NOT_FOUND, "unknown-run", format!("no run {id}"))
        }
        other => ApiError::internal(state.scrub(other.to_string())),
    })
}

async fn get_run(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<RunView>> {
    match state.session(&id) {
        Ok(session) => match session.run.try_lock() {
            Ok(run) => Ok(Json(RunView::of_run(&run))),
            Err(_) => Ok(Json(RunView::build(&load_manifest(&state, &id)?, &[], true, true))),
        },
        // closed sessions remain readable from disk
        Err(_) => Ok(Json(RunView::build(&load_manifest(&state, &id)?, &[], false, false))),
    }
}

/// Lock the session without waiting and run `f` on a blocking thread.
async fn with_run<T: Send + 'static>(
    state: &AppState,
    id: &str,
    f: impl FnOnce(&mut Run) -> Result<T, PipelineError> + Send + 'static,
) -> ApiResult<(T, RunView)> {
    let session = state.session(id)?;
    let mut run = session.run.clone().try_lock_owned().map_err(|_| ApiError::busy())?;
    session.touch();
    let (result, view) = tokio::task::spawn_blocking(move || {
        let result = f(&mut run);
        (result, RunView::of_run(&run))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    session.touch();
    result.map(|t| (t, view)).map_err(|e| state.pipeline_error(e))
}

async fn run_stage(
    State(state): State<AppState>,
    UrlPath((id, stage)): UrlPath<(String, String)>,
) -> ApiResult<Json<Value>> {
    let stage = parse_stage(&stage)?;
    let (detail, view) = with_run(&state, &id, move |run| {
        Ok(match stage {
            Stage::Detect => json!({ "retained": run.run_detect()? }),
            Stage::Segment => json!({ "mask_pixels": run.run_segment()? }),
            Stage::Inpaint => {
                run.run_inpaint()?;
                json!({})
            }
            Stage::Describe => json!({ "description": run.run_describe()? }),
        })
    })
    .await?;
    Ok(Json(json!({ "stage": stage, "result": detail, "state": view })))
}

async fn patch_config(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let patch: ConfigPatch =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("config: {e}")))?;
    let (config, view) = with_run(&state, &id, move |run| run.update_config(&patch).cloned()).await?;
    Ok(Json(json!({ "config": config, "state": view })))
}

async fn review(state: AppState, id: String, stage: String, decision: GateDecision) -> ApiResult<Json<Value>> {
    let stage = parse_stage(&stage)?;
    let ((), view) = with_run(&state, &id, move |run| {
        run.review(stage, decision)?;
        // accepting the last stage closes the record
        if decision == GateDecision::Accepted && stage == Stage::Describe {
            run.finalize()?;
        }
        Ok(())
    })
    .await?;
    Ok(Json(json!({ "stage": stage, "decision": decision, "state": view })))
}

async fn accept_stage(
    State(state): State<AppState>,
    UrlPath((id, stage)): UrlPath<(String, String)>,
) -> ApiResult<Json<Value>> {
    review(state, id, stage, GateDecision::Accepted).await
}

async fn reject_stage(
    State(state): State<AppState>,
    UrlPath((id, stage)): UrlPath<(String, String)>,
) -> ApiResult<Json<Value>> {
    review(state, id, stage, GateDecision::Rejected).await
}

#[derive(Debug, Deserialize)]
struct RevisionQuery {
    revision: Option<u32>,
}

fn bytes_response(content_type: &'static str, bytes: Vec<u8>, sha256: Option<&str>) -> Response {
    let mut resp = (StatusCode::OK, bytes).into_response();
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
    if let Some(sha) = sha256.and_then(|s| HeaderValue::from_str(s).ok()) {
        resp.headers_mut().insert("x-artifact-sha256", sha);
    }
    resp
}

async fn get_artifact(
    State(state): State<AppState>,
    UrlPath((id, kind)): UrlPath<(String, String)>,
    Query(q): Query<RevisionQuery>,
) -> ApiResult<Response> {
    let kind = ArtifactKind::parse(&kind)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown-kind", format!("no artifact kind '{kind}'")))?;
    let m = load_manifest(&state, &id)?;
    let entry = match q.revision {
        Some(r) => m.entry(kind, r),
        None => m.latest(kind),
    }
    .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no-artifact", format!("run {id} has no {kind} yet")))?;
    let bytes = state
        .0
        .store
        .read(&id, &entry.path)
        .map_err(|e| ApiError::internal(state.scrub(e.to_string())))?;
    Ok(bytes_response(kind.content_type(), bytes, Some(&entry.sha256)))
}

async fn get_manifest(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    load_manifest(&state, &id)?;
    let bytes = state
        .0
        .store
        .read(&id, MANIFEST_FILE)
        .map_err(|e| ApiError::internal(state.scrub(e.to_string())))?;
    Ok(bytes_response("application/json", bytes, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lsid_core::backends::BackendSet;

    fn state(dir: &Path) -> AppState {
        AppState::new(ArtifactStore::open(dir).unwrap(), BackendKind::Mock, Arc::new(BackendSet::mock))
    }

    #[test]
    fn scrub_replaces_the_store_root() {
        let dir = tempfile::tempdir().unwrap();
        let msg = format!("cannot read {}/abc/mask.png", dir.path().display());
        let out = scrub_paths(&msg, dir.path());
        assert_eq!(out, "cannot read <store>/abc/mask.png");
    }

    #[test]
    fn gc_with_no_sessions() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(state(dir.path()).session_gc(Instant::now()), 0);
    }

    #[test]
    fn ordering_error_body_names_predecessor() {
        let e = ApiError::from(PipelineError::Ordering {
            stage: Stage::Inpaint,
            requires: Stage::Segment,
        });
        assert_eq!(e.status, StatusCode::CONFLICT);
        assert_eq!(e.details["requires"], "segment");
    }
}
