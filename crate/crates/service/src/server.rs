//! HTTP API.
//!
//! | Method | Path                 | Response                                   |
//! |--------|----------------------|--------------------------------------------|
//! | POST   | `/runs`              | 202 run summary (multipart `file`, `config`, optional `ground_truth`) |
//! | GET    | `/runs`              | run summaries, newest last                 |
//! | GET    | `/runs/{id}`         | run summary                                |
//! | GET    | `/runs/{id}/events`  | NDJSON event stream (replay, then live)    |
//! | GET    | `/runs/{id}/result`  | final CSV; 409 unless DONE                 |
//! | GET    | `/runs/{id}/metrics` | report totals and counts; 409 unless DONE  |
//! | DELETE | `/runs/{id}`         | 204; 409 while the run is active           |
//!
//! A provider credential may be passed per run in the `x-provider-key`
//! header. It is kept in memory for the run only.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use futures::StreamExt;
use serde::Serialize;
use serde_json::{json, Value};
use tracing::{info, warn};

use committee_core::dataset::{read_csv, RawTable};
use committee_core::evaluation::{evaluate_report, GroundTruth, Metrics};
use committee_core::orchestrator::{prepare_dataset, EventLog, RowStatus, RunConfig, RunReport, Totals};

use crate::exec::{execute, prepare_run, Environment};

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 20 * 1024 * 1024;
pub const CREDENTIAL_HEADER: &str = "x-provider-key";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunState {
    Pending,
    Running,
    Done,
    Failed,
}

impl RunState {
    fn is_active(self) -> bool {
        matches!(self, RunState::Pending | RunState::Running)
    }
}

struct Progress {
    state: RunState,
    report: Option<Arc<RunReport>>,
    evaluation: Option<Metrics>,
    error: Option<String>,
}

pub struct RunHandle {
    id: String,
    created_at: DateTime<Utc>,
    config: RunConfig,
    dir: PathBuf,
    events: Arc<EventLog>,
    progress: Mutex<Progress>,
}

impl RunHandle {
    fn state(&self) -> RunState {
        self.progress.lock().expect("run state poisoned").state
    }

    /// Moves forward only: PENDING → RUNNING → DONE | FAILED.
    fn advance(&self, next: RunState) {
        let mut p = self.progress.lock().expect("run state poisoned");
        let allowed = matches!(
            (p.state, next),
            (RunState::Pending, RunState::Running)
                | (RunState::Pending | RunState::Running, RunState::Done | RunState::Failed)
        );
        if allowed {
            p.state = next;
        }
    }

    fn summary(&self) -> RunSummary {
        let p = self.progress.lock().expect("run state poisoned");
        RunSummary {
            run_id: self.id.clone(),
            state: p.state,
            created_at: self.created_at,
            config: self.config.clone(),
            status_counts: p.report.as_ref().map(|r| r.status_counts.clone()),
            error: p.error.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub state: RunState,
    pub created_at: DateTime<Utc>,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status_counts: Option<BTreeMap<RowStatus, usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct MetricsDocument {
    pub run_id: String,
    pub model_id: String,
    pub totals: Totals,
    pub status_counts: BTreeMap<RowStatus, usize>,
    pub final_records: usize,
    pub dropped_records: usize,
    pub integrity_findings: usize,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub runs_dir: PathBuf,
    pub max_upload_bytes: usize,
    pub env: Environment,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

struct Inner {
    config: ServerConfig,
    runs: Mutex<BTreeMap<String, Arc<RunHandle>>>,
    order: Mutex<Vec<String>>,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Self {
        Self(Arc::new(Inner {
            config,
            runs: Mutex::new(BTreeMap::new()),
            order: Mutex::new(Vec::new()),
        }))
    }

    fn get(&self, id: &str) -> Option<Arc<RunHandle>> {
        self.0.runs.lock().expect("registry poisoned").get(id).cloned()
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.0.config.max_upload_bytes;
    Router::new()
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run).delete(delete_run))
        .route("/runs/{id}/events", get(stream_events))
        .route("/runs/{id}/result", get(get_result))
        .route("/runs/{id}/metrics", get(get_metrics))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn invalid(message: impl Into<String>, field: &str, detail: Option<&str>) -> Response {
    let mut body = json!({ "error": message.into(), "field": field });
    if let Some(d) = detail {
        body["schema_field"] = Value::String(d.to_string());
    }
    (StatusCode::UNPROCESSABLE_ENTITY, Json(body)).into_response()
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("no run {id:?}"))
}

fn not_done(state: RunState) -> Response {
    let state = serde_json::to_value(state).unwrap_or(Value::Null);
    (
        StatusCode::CONFLICT,
        Json(json!({ "error": "run is not DONE", "state": state })),
    )
        .into_response()
}

struct Upload {
    csv: Option<Bytes>,
    config: Option<String>,
    ground_truth: Option<Bytes>,
}

async fn read_upload(mut multipart: Multipart) -> Result<Upload, Response> {
    let mut upload = Upload {
        csv: None,
        config: None,
        ground_truth: None,
    };
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(error(e.status(), e.body_text())),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| error(e.status(), e.body_text()))?;
        match name.as_str() {
            "file" | "csv" => upload.csv = Some(bytes),
            "config" => {
                let text = String::from_utf8(bytes.to_vec())
                    .map_err(|_| invalid("config must be UTF-8 JSON", "config", None))?;
                upload.config = Some(text);
            }
            "ground_truth" => upload.ground_truth = Some(bytes),
            _ => {}
        }
    }
    Ok(upload)
}

struct Validated {
    config: RunConfig,
    table: RawTable,
    csv: Bytes,
    ground_truth: Option<RawTable>,
}

fn validate(upload: Upload) -> Result<Validated, Response> {
    let text = upload.config.ok_or_else(|| invalid("missing run configuration", "config", None))?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| invalid(format!("invalid configuration: {e}"), "config", None))?;
    if let Err(e) = committee_core::schema::schema_from_annotation(&config.schema, &[], &config.description) {
        return Err(invalid(format!("invalid schema: {e}"), "schema", e.field()));
    }
    if config.parallelism == 0 {
        return Err(invalid("parallelism must be at least 1", "parallelism", None));
    }
    let csv = upload.csv.ok_or_else(|| invalid("missing CSV upload", "file", None))?;
    let table = read_csv(csv.as_ref()).map_err(|e| invalid(e.to_string(), "file", None))?;
    prepare_dataset(&table, &config).map_err(|e| invalid(e.to_string(), "file", None))?;
    let ground_truth = upload
        .ground_truth
        .map(|b| read_csv(b.as_ref()).map_err(|e| invalid(e.to_string(), "ground_truth", None)))
        .transpose()?;
    Ok(Validated {
        config,
        table,
        csv,
        ground_truth,
    })
}

async fn create_run(State(state): State<AppState>, headers: HeaderMap, multipart: Multipart) -> Response {
    let upload = match read_upload(multipart).await {
        Ok(u) => u,
        Err(r) => return r,
    };
    let Validated {
        config,
        table,
        csv,
        ground_truth,
    } = match validate(upload) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let credential = headers
        .get(CREDENTIAL_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);

    let id = uuid::Uuid::new_v4().simple().to_string();
    let dir = state.0.config.runs_dir.join(&id);
    if let Err(e) = tokio::fs::create_dir_all(&dir).await {
        return error(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot create run directory: {e}"));
    }
    if let Err(e) = tokio::fs::write(dir.join("input.csv"), &csv).await {
        return error(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot store upload: {e}"));
    }
    let handle = Arc::new(RunHandle {
        id: id.clone(),
        created_at: Utc::now(),
        config: config.clone(),
        dir: dir.clone(),
        events: EventLog::new(),
        progress: Mutex::new(Progress {
            state: RunState::Pending,
            report: None,
            evaluation: None,
            error: None,
        }),
    });
    state.0.runs.lock().expect("registry poisoned").insert(id.clone(), handle.clone());
    state.0.order.lock().expect("registry poisoned").push(id.clone());
    let summary = handle.summary();
    info!(run_id = %id, "run created");

    let env = state.0.config.env.clone();
    tokio::spawn(async move {
        handle.advance(RunState::Running);
        let prepared = prepare_run(&table, &config, credential, &env, &dir, Some(handle.events.clone()));
        let result = match prepared {
            Ok(p) => execute(p).await,
            Err(e) => {
                handle.events.close();
                Err(e)
            }
        };
        let mut p = handle.progress.lock().expect("run state poisoned");
        match result {
            Ok(report) => {
                p.evaluation = ground_truth.and_then(|gt| match GroundTruth::from_table(&gt, &report.schema) {
                    Ok(gt) => Some(evaluate_report(&report, &gt)),
                    Err(e) => {
                        warn!(run_id = %handle.id, error = %e, "ground truth unusable");
                        None
                    }
                });
                p.report = Some(Arc::new(report));
                p.state = RunState::Done;
            }
            Err(e) => {
                warn!(run_id = %handle.id, error = %e, "run failed");
                p.error = Some(e.to_string());
                p.state = RunState::Failed;
            }
        }
    });
    (StatusCode::ACCEPTED, Json(summary)).into_response()
}

async fn list_runs(State(state): State<AppState>) -> Json<Vec<RunSummary>> {
    let order = state.0.order.lock().expect("registry poisoned").clone();
    Json(order.iter().filter_map(|id| state.get(id)).map(|h| h.summary()).collect())
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.get(&id) {
        Some(h) => Json(h.summary()).into_response(),
        None => not_found(&id),
    }
}

async fn stream_events(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(h) = state.get(&id) else {
        return not_found(&id);
    };
    let lines = h.events.subscribe().map(|e| {
        let mut line = serde_json::to_vec(&e).expect("events serialize");
        line.push(b'\n');
        Ok::<_, Infallible>(Bytes::from(line))
    });
    Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(lines))
        .expect("static response parts")
}

fn finished(state: &AppState, id: &str) -> Result<(Arc<RunHandle>, Arc<RunReport>, Option<Metrics>), Response> {
    let h = state.get(id).ok_or_else(|| not_found(id))?;
    let p = h.progress.lock().expect("run state poisoned");
    match (&p.state, &p.report) {
        (RunState::Done, Some(r)) => {
            let (r, m) = (r.clone(), p.evaluation.clone());
            drop(p);
            Ok((h, r, m))
        }
        (s, _) => Err(not_done(*s)),
    }
}

async fn get_result(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match finished(&state, &id) {
        Ok((_, report, _)) => (
            [
                (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
                (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{id}.csv\"")),
            ],
            report.output_csv(),
        )
            .into_response(),
        Err(r) => r,
    }
}

async fn get_metrics(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match finished(&state, &id) {
        Ok((h, r, evaluation)) => Json(MetricsDocument {
            run_id: h.id.clone(),
            model_id: r.model_id.clone(),
            totals: r.totals.clone(),
            status_counts: r.status_counts.clone(),
            final_records: r.records.len(),
            dropped_records: r.dropped.len(),
            integrity_findings: r.integrity_findings.len(),
            warnings: r.warnings.clone(),
            evaluation,
        })
        .into_response(),
        Err(r) => r,
    }
}

async fn delete_run(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(h) = state.get(&id) else {
        return not_found(&id);
    };
    if h.state().is_active() {
        return not_done(h.state());
    }
    state.0.runs.lock().expect("registry poisoned").remove(&id);
    state.0.order.lock().expect("registry poisoned").retain(|r| r != &id);
    if let Err(e) = tokio::fs::remove_dir_all(&h.dir).await {
        if e.kind() != std::io::ErrorKind::NotFound {
            return error(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot remove run directory: {e}"));
        }
    }
    StatusCode::NO_CONTENT.into_response()
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(addr: std::net::SocketAddr, config: ServerConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(&config.runs_dir)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(AppState::new(config)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
