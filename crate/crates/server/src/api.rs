//! HTTP routes. Handlers authenticate, hand the work to the core library
//! on the blocking pool, and map failures onto [`ApiError`].

use std::collections::{BTreeSet, VecDeque};
use std::convert::Infallible;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use detflow_core::augment::{ImageBuffer, OpRegistry};
use detflow_core::config::{catalog, parse_config, ConfigError, FieldError, TrainingConfig};
use detflow_core::export::{bundle_archive, export_bundle, render_detections, verify_bundle, RenderSpec};
use detflow_core::ingest::parse_labelmap_text;
use detflow_core::jobs::{JobEvent, JobManager};
use detflow_core::metrics::{evaluate, parse_detections, parse_ground_truth, Detection, GroundTruthSet, MetricsReport, Protocol};
use detflow_core::preprocess::{run_preprocess, PreprocessRequest};
use detflow_core::records::{read_records, ExampleRecord};
use detflow_core::scheduler::{Lease, QueueEntry};
use detflow_core::workspace::{AccountInfo, FileKind, WorkspaceId, WorkspaceStore};
use futures_util::Stream;
use serde::{Deserialize, Serialize};
use tower_http::services::{ServeDir, ServeFile};

use crate::error::ApiError;

pub const DEFAULT_KEEP_ALIVE: Duration = Duration::from_secs(15);

#[derive(Clone)]
pub struct AppState {
    pub jobs: JobManager,
    pub registry: Arc<OpRegistry>,
    /// Heartbeat interval on event streams.
    pub keep_alive: Duration,
}

impl AppState {
    pub fn new(jobs: JobManager) -> Self {
        Self {
            jobs,
            registry: Arc::new(OpRegistry::builtin()),
            keep_alive: DEFAULT_KEEP_ALIVE,
        }
    }

    fn store(&self) -> &Arc<WorkspaceStore> {
        self.jobs.store()
    }
}

#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
pub struct ApiJson<T>(pub T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Path), rejection(ApiError))]
pub struct ApiPath<T>(pub T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(ApiError))]
pub struct ApiQuery<T>(pub T);

/// The authenticated account behind a bearer token.
pub struct Caller {
    pub account: AccountInfo,
    pub ws: WorkspaceId,
}

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, ApiError> {
        let token = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or_else(ApiError::unauthenticated)?;
        let (account, ws) = state.store().resolve_token(token).map_err(|_| ApiError::unauthenticated())?;
        Ok(Self { account, ws })
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn field(field: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

pub fn router(state: AppState, console_dir: Option<&Path>, max_body_bytes: usize) -> Router {
    let api = Router::new()
        .route("/health", get(|| async { Json(serde_json::json!({"status": "ok"})) }))
        .route("/accounts", post(create_account))
        .route("/sessions", post(login))
        .route("/workspace", get(workspace_info))
        .route("/files", get(list_files))
        .route("/files/{*path}", get(get_file).put(put_file).delete(delete_file))
        .route("/preprocess", post(preprocess))
        .route("/catalog", get(model_catalog))
        .route("/jobs", post(create_job).get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/start", post(start_job))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/jobs/{id}/config", get(job_config))
        .route("/jobs/{id}/events", get(job_events))
        .route("/jobs/{id}/export", post(export_job))
        .route("/exports/{id}", get(export_manifest))
        .route("/exports/{id}/archive", get(export_archive))
        .route("/evaluations", post(run_evaluation))
        .route("/render", post(render))
        .route("/scheduler/status", get(scheduler_status))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this endpoint")
        })
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state);

    let app = Router::new().nest("/api", api);
    match console_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => app.route("/", get(placeholder_console)),
    }
}

async fn placeholder_console() -> Html<&'static str> {
    Html(
        "<!doctype html><html><head><meta charset=\"utf-8\"><title>detflow</title></head>\
         <body><h1>detflow</h1><p>No console bundle is configured. Set <code>console_dir</code> \
         to serve one here. The HTTP API lives under <code>/api</code>.</p></body></html>",
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Credentials {
    display_name: String,
    password: String,
}

#[derive(Serialize)]
struct AccountCreated {
    user_id: String,
    display_name: String,
    workspace_id: String,
    quota_bytes: u64,
}

async fn create_account(State(st): State<AppState>, ApiJson(c): ApiJson<Credentials>) -> Result<Response, ApiError> {
    let created = blocking(move || {
        let (info, ws) = st.store().create_account(&c.display_name, &c.password)?;
        Ok(AccountCreated {
            user_id: info.user_id.0,
            display_name: info.display_name,
            workspace_id: ws.workspace_id.0,
            quota_bytes: ws.quota_bytes,
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn login(State(st): State<AppState>, ApiJson(c): ApiJson<Credentials>) -> Result<Response, ApiError> {
    let token = blocking(move || Ok(st.store().authenticate(&c.display_name, &c.password)?)).await?;
    Ok(Json(token).into_response())
}

async fn workspace_info(State(st): State<AppState>, caller: Caller) -> Result<Response, ApiError> {
    Ok(Json(st.store().workspace(&caller.ws)?).into_response())
}

#[derive(Deserialize)]
struct ListQuery {
    prefix: Option<String>,
}

async fn list_files(State(st): State<AppState>, caller: Caller, ApiQuery(q): ApiQuery<ListQuery>) -> Result<Response, ApiError> {
    Ok(Json(st.store().list_files(&caller.ws, q.prefix.as_deref())?).into_response())
}

async fn get_file(State(st): State<AppState>, caller: Caller, ApiPath(path): ApiPath<String>) -> Result<Response, ApiError> {
    let bytes = blocking(move || Ok(st.store().get_file(&caller.ws, &path)?)).await?;
    Ok(([(CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn put_file(State(st): State<AppState>, caller: Caller, ApiPath(path): ApiPath<String>, body: Bytes) -> Result<Response, ApiError> {
    let stored = blocking(move || Ok(st.store().put_file(&caller.ws, &path, &body, None)?)).await?;
    Ok(Json(stored).into_response())
}

async fn delete_file(State(st): State<AppState>, caller: Caller, ApiPath(path): ApiPath<String>) -> Result<Response, ApiError> {
    blocking(move || Ok(st.store().delete_file(&caller.ws, &path)?)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn preprocess(State(st): State<AppState>, caller: Caller, ApiJson(req): ApiJson<PreprocessRequest>) -> Result<Response, ApiError> {
    let result = blocking(move || Ok(run_preprocess(st.store(), &caller.ws, &req, &st.registry)?)).await?;
    Ok(Json(result).into_response())
}

#[derive(Serialize)]
struct CatalogEntry {
    architecture: String,
    backbone: String,
    identifier: String,
}

async fn model_catalog(_caller: Caller) -> Json<Vec<CatalogEntry>> {
    Json(
        catalog()
            .into_iter()
            .map(|m| CatalogEntry {
                architecture: m.architecture.as_str().into(),
                backbone: m.backbone.as_str().into(),
                identifier: m.identifier(),
            })
            .collect(),
    )
}

/// Accepts a JSON `TrainingConfig`, or the `key = value` text format
/// when sent as `text/plain`.
fn config_from_body(headers: &HeaderMap, body: &[u8]) -> Result<TrainingConfig, ApiError> {
    let is_text = headers
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("text/plain"));
    if is_text {
        let text = std::str::from_utf8(body).map_err(|_| ApiError::invalid("invalid_body", "config text is not UTF-8"))?;
        return parse_config(text).map_err(|e| match e {
            ConfigError::Invalid(details) => ApiError::validation(details),
            ConfigError::Parse { line, message } => ApiError::validation(vec![field(&format!("line {line}"), message)]),
        });
    }
    serde_json::from_slice(body).map_err(|e| ApiError::invalid("invalid_json", format!("training config: {e}")))
}

async fn create_job(State(st): State<AppState>, caller: Caller, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let config = config_from_body(&headers, &body)?;
    let job = blocking(move || Ok(st.jobs.create_job(&caller.ws, config)?)).await?;
    Ok((StatusCode::CREATED, Json(job)).into_response())
}

async fn list_jobs(State(st): State<AppState>, caller: Caller) -> Json<serde_json::Value> {
    Json(serde_json::to_value(st.jobs.list_jobs(&caller.ws)).expect("jobs serialize"))
}

async fn get_job(State(st): State<AppState>, caller: Caller, ApiPath(id): ApiPath<String>) -> Result<Response, ApiError> {
    Ok(Json(st.jobs.get_job(&caller.ws, &id)?).into_response())
}

#[derive(Serialize)]
struct Started {
    job: detflow_core::jobs::TrainingJob,
    queue_entry: QueueEntry,
}

async fn start_job(State(st): State<AppState>, caller: Caller, ApiPath(id): ApiPath<String>) -> Result<Response, ApiError> {
    let (job, queue_entry) = blocking(move || Ok(st.jobs.start_job(&caller.ws, &id)?)).await?;
    Ok((StatusCode::ACCEPTED, Json(Started { job, queue_entry })).into_response())
}

async fn cancel_job(State(st): State<AppState>, caller: Caller, ApiPath(id): ApiPath<String>) -> Result<Response, ApiError> {
    let job = blocking(move || Ok(st.jobs.cancel_job(&caller.ws, &id)?)).await?;
    Ok(Json(job).into_response())
}

async fn job_config(State(st): State<AppState>, caller: Caller, ApiPath(id): ApiPath<String>) -> Result<Response, ApiError> {
    let text = st.jobs.rendered_config(&caller.ws, &id)?;
    Ok(([(CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}

#[derive(Deserialize)]
struct EventsQuery {
    from_seq: Option<u64>,
}

fn sse_event(ev: &JobEvent) -> Event {
    Event::default()
        .id(ev.seq.to_string())
        .data(serde_json::to_string(ev).expect("job event serializes"))
}

/// Replays the job's event log from `from_seq` (or after `Last-Event-ID`),
/// then follows it live until the log closes.
async fn job_events(
    State(st): State<AppState>,
    caller: Caller,
    ApiPath(id): ApiPath<String>,
    ApiQuery(q): ApiQuery<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let log = st.jobs.events(&caller.ws, &id)?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|seq| seq + 1);
    let from = q.from_seq.or(resume).unwrap_or(0);
    let rx = log.subscribe();
    let stream = futures_util::stream::unfold((log, rx, from, VecDeque::new()), |(log, mut rx, next, mut buf)| async move {
        loop {
            if let Some(ev) = buf.pop_front() {
                let ev: JobEvent = ev;
                let item = Ok(sse_event(&ev));
                return Some((item, (log, rx, ev.seq + 1, buf)));
            }
            rx.borrow_and_update();
            let (events, closed) = log.read_from(next);
            if !events.is_empty() {
                buf.extend(events);
                continue;
            }
            if closed || rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(st.keep_alive)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportRequest {
    checkpoint_step: u64,
}

async fn export_job(
    State(st): State<AppState>,
    caller: Caller,
    ApiPath(id): ApiPath<String>,
    ApiJson(req): ApiJson<ExportRequest>,
) -> Result<Response, ApiError> {
    let bundle = blocking(move || Ok(export_bundle(&st.jobs, &caller.ws, &id, req.checkpoint_step)?)).await?;
    Ok((StatusCode::CREATED, Json(bundle)).into_response())
}

async fn export_manifest(State(st): State<AppState>, caller: Caller, ApiPath(id): ApiPath<String>) -> Result<Response, ApiError> {
    let manifest = blocking(move || Ok(verify_bundle(&st.jobs, &caller.ws, &id)?)).await?;
    Ok(Json(manifest).into_response())
}

async fn export_archive(State(st): State<AppState>, caller: Caller, ApiPath(id): ApiPath<String>) -> Result<Response, ApiError> {
    let name = format!("attachment; filename=\"{id}.tar\"");
    let tar = blocking(move || Ok(bundle_archive(&st.jobs, &caller.ws, &id)?)).await?;
    Ok(([(CONTENT_TYPE, "application/x-tar".to_string()), (axum::http::header::CONTENT_DISPOSITION, name)], tar).into_response())
}

fn default_protocol() -> Protocol {
    Protocol::Voc50AllPoint
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluationRequest {
    #[serde(default = "default_protocol")]
    protocol: Protocol,
    /// Inline detections, or a workspace JSON file holding them.
    detections: Option<Vec<Detection>>,
    detections_path: Option<String>,
    /// Supplies default labelmap and eval record paths.
    job_id: Option<String>,
    /// The checkpoint the detections came from; must exist on the job.
    checkpoint_step: Option<u64>,
    labelmap_path: Option<String>,
    eval_record_path: Option<String>,
    /// JSON ground truth; takes precedence over the eval record.
    ground_truth_path: Option<String>,
}

#[derive(Serialize)]
struct EvaluationResponse {
    #[serde(flatten)]
    report: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    job_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_step: Option<u64>,
    table: String,
}

fn run_evaluation_blocking(st: &AppState, ws: &WorkspaceId, req: EvaluationRequest) -> Result<EvaluationResponse, ApiError> {
    let store = st.store();
    let job = req.job_id.as_deref().map(|id| st.jobs.get_job(ws, id)).transpose()?;
    if let Some(step) = req.checkpoint_step {
        let job = job
            .as_ref()
            .ok_or_else(|| ApiError::validation(vec![field("checkpoint_step", "requires job_id")]))?;
        if job.checkpoint_at(step).is_none() {
            return Err(ApiError::not_found(format!("job `{}` has no checkpoint at step {step}", job.job_id)));
        }
    }
    let dets = match (req.detections, &req.detections_path) {
        (Some(d), None) => d,
        (None, Some(p)) => parse_detections(&store.get_file(ws, p)?)?,
        _ => {
            return Err(ApiError::validation(vec![field(
                "detections",
                "give exactly one of detections or detections_path",
            )]))
        }
    };
    let labelmap_path = req
        .labelmap_path
        .or_else(|| job.as_ref().map(|j| j.config.labelmap_path.clone()))
        .ok_or_else(|| ApiError::validation(vec![field("labelmap_path", "required when no job_id is given")]))?;
    let lm_text = String::from_utf8(store.get_file(ws, &labelmap_path)?)
        .map_err(|_| ApiError::invalid("parse_error", format!("labelmap `{labelmap_path}` is not UTF-8")))?;
    let lm = parse_labelmap_text(&lm_text).map_err(|e| ApiError::invalid("parse_error", format!("labelmap `{labelmap_path}`: {e}")))?;
    let gts = match (&req.ground_truth_path, req.eval_record_path.or_else(|| job.as_ref().map(|j| j.config.eval_record_path.clone()))) {
        (Some(p), _) => parse_ground_truth(&store.get_file(ws, p)?)?,
        (None, Some(p)) => {
            let payloads = read_records(store.get_file(ws, &p)?.as_slice())?;
            let examples = payloads.iter().map(|b| ExampleRecord::decode(b)).collect::<Result<Vec<_>, _>>()?;
            GroundTruthSet::from_examples(&examples)?
        }
        (None, None) => {
            return Err(ApiError::validation(vec![field(
                "eval_record_path",
                "give ground_truth_path, eval_record_path or job_id",
            )]))
        }
    };
    let report = evaluate(&dets, &gts, req.protocol, &lm)?;
    Ok(EvaluationResponse {
        table: report.to_table(),
        report,
        job_id: job.map(|j| j.job_id),
        checkpoint_step: req.checkpoint_step,
    })
}

async fn run_evaluation(State(st): State<AppState>, caller: Caller, ApiJson(req): ApiJson<EvaluationRequest>) -> Result<Response, ApiError> {
    let resp = blocking(move || run_evaluation_blocking(&st, &caller.ws, req)).await?;
    Ok(Json(resp).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderRequest {
    image_path: String,
    detections: Vec<Detection>,
    labelmap_path: String,
    #[serde(default)]
    spec: RenderSpec,
    /// Also store the PNG in the workspace.
    output_path: Option<String>,
}

async fn render(State(st): State<AppState>, caller: Caller, ApiJson(req): ApiJson<RenderRequest>) -> Result<Response, ApiError> {
    let png = blocking(move || {
        let store = st.store();
        let lm_text = String::from_utf8(store.get_file(&caller.ws, &req.labelmap_path)?)
            .map_err(|_| ApiError::invalid("parse_error", "labelmap is not UTF-8"))?;
        let lm = parse_labelmap_text(&lm_text).map_err(|e| ApiError::invalid("parse_error", e.to_string()))?;
        let img = ImageBuffer::decode(&store.get_file(&caller.ws, &req.image_path)?)
            .map_err(|e| ApiError::invalid("image_error", format!("{}: {e}", req.image_path)))?;
        let out = render_detections(&img, &req.detections, &lm, &req.spec).map_err(ApiError::validation)?;
        let png = out.encode_png();
        if let Some(path) = &req.output_path {
            store.put_file(&caller.ws, path, &png, Some(FileKind::Image))?;
        }
        Ok(png)
    })
    .await?;
    Ok(([(CONTENT_TYPE, "image/png")], png).into_response())
}

/// Pool-wide counts, with queue entries and leases limited to the
/// caller's own jobs.
#[derive(Serialize)]
struct SchedulerView {
    capacity: usize,
    free_gpus: usize,
    queue_length: usize,
    queue: Vec<QueueEntry>,
    leases: Vec<Lease>,
}

async fn scheduler_status(State(st): State<AppState>, caller: Caller) -> Json<SchedulerView> {
    let own: BTreeSet<String> = st.jobs.list_jobs(&caller.ws).into_iter().map(|j| j.job_id).collect();
    let status = st.jobs.scheduler_status();
    Json(SchedulerView {
        capacity: status.capacity,
        free_gpus: status.free_gpus.len(),
        queue_length: status.queue.len(),
        queue: status.queue.into_iter().filter(|q| own.contains(&q.job_id)).collect(),
        leases: status.leases.into_iter().filter(|l| own.contains(&l.job_id)).collect(),
    })
}
