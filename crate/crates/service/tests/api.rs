use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::http::HeaderMap;
use axum::routing::post;
use axum::{Json, Router};
use committee_core::gateway::{estimate_cost, LedgerEntry, PricingTable};
use committee_core::orchestrator::{ProviderKind, RowEvent, RunConfig, Toggles};
use committee_fixtures as fx;
use committee_service::exec::{Environment, SearchSettings};
use committee_service::server::{router, AppState, ServerConfig, CREDENTIAL_HEADER};
use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;
use serde_json::{json, Value};

struct Harness {
    pages: fx::PageServer,
    files: fx::FixtureFiles,
    runs_dir: PathBuf,
    base: String,
    http: reqwest::Client,
    _dir: tempfile::TempDir,
}

impl Harness {
    async fn start(pages: fx::PageServer, max_upload_bytes: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let files = fx::write_files(dir.path(), pages.port()).unwrap();
        let runs_dir = dir.path().join("runs");
        let env = Environment {
            pricing: PricingTable::load(&files.pricing).unwrap(),
            search: SearchSettings::Fixture(files.search.clone()),
            resolve: pages.resolve(),
            politeness_delay: Duration::ZERO,
            replay: None,
        };
        let app = router(AppState::new(ServerConfig {
            runs_dir: runs_dir.clone(),
            max_upload_bytes,
            env,
        }));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        Self {
            pages,
            files,
            runs_dir,
            base: format!("http://{addr}"),
            http: reqwest::Client::new(),
            _dir: dir,
        }
    }

    async fn new() -> Self {
        Self::start(fx::PageServer::start(), 20 * 1024 * 1024).await
    }

    fn config(&self) -> RunConfig {
        let mut config = RunConfig::new(fx::SCHEMA, fx::DESCRIPTION);
        config.provider.kind = ProviderKind::Scripted;
        config.provider.fixture = Some(self.files.scripted.clone());
        config
    }

    fn form(&self, config: &RunConfig) -> Form {
        let csv = std::fs::read(&self.files.input).unwrap();
        Form::new()
            .text("config", serde_json::to_string(config).unwrap())
            .part("file", Part::bytes(csv).file_name("input.csv"))
    }

    async fn create(&self, form: Form, credential: Option<&str>) -> reqwest::Response {
        let mut req = self.http.post(format!("{}/runs", self.base)).multipart(form);
        if let Some(c) = credential {
            req = req.header(CREDENTIAL_HEADER, c);
        }
        req.send().await.unwrap()
    }

    async fn get(&self, path: &str) -> reqwest::Response {
        self.http.get(format!("{}{path}", self.base)).send().await.unwrap()
    }

    async fn state(&self, id: &str) -> String {
        let doc: Value = self.get(&format!("/runs/{id}")).await.json().await.unwrap();
        doc["state"].as_str().unwrap().to_string()
    }

    async fn wait(&self, id: &str) -> String {
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let state = self.state(id).await;
            if state == "DONE" || state == "FAILED" {
                return state;
            }
            assert!(Instant::now() < deadline, "run {id} still {state}");
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    async fn start_run(&self, config: &RunConfig) -> String {
        let resp = self.create(self.form(config), None).await;
        assert_eq!(resp.status(), StatusCode::ACCEPTED);
        let doc: Value = resp.json().await.unwrap();
        doc["run_id"].as_str().unwrap().to_string()
    }

    async fn events(&self, id: &str) -> Vec<RowEvent> {
        let resp = self.get(&format!("/runs/{id}/events")).await;
        assert_eq!(resp.status(), StatusCode::OK);
        assert_eq!(resp.headers()["content-type"], "application/x-ndjson");
        let body = resp.text().await.unwrap();
        body.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[tokio::test]
async fn run_lifecycle_from_pending_to_deleted() {
    let h = Harness::start(fx::PageServer::with_delay(Duration::from_millis(150)), 20 * 1024 * 1024).await;
    let resp = h.create(h.form(&h.config()), None).await;
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    let summary: Value = resp.json().await.unwrap();
    assert_eq!(summary["state"], "PENDING");
    let id = summary["run_id"].as_str().unwrap().to_string();

    let mut saw_running = false;
    for _ in 0..200 {
        if h.state(&id).await == "RUNNING" {
            saw_running = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    assert!(saw_running, "never observed RUNNING");
    assert_eq!(h.get(&format!("/runs/{id}/result")).await.status(), StatusCode::CONFLICT);
    assert_eq!(h.get(&format!("/runs/{id}/metrics")).await.status(), StatusCode::CONFLICT);
    let busy = h.http.delete(format!("{}/runs/{id}", h.base)).send().await.unwrap();
    assert_eq!(busy.status(), StatusCode::CONFLICT);

    assert_eq!(h.wait(&id).await, "DONE");
    let listed: Vec<Value> = h.get("/runs").await.json().await.unwrap();
    assert_eq!(listed.len(), 1);
    assert_eq!(listed[0]["status_counts"]["ACCEPT"], 6);

    let deleted = h.http.delete(format!("{}/runs/{id}", h.base)).send().await.unwrap();
    assert_eq!(deleted.status(), StatusCode::NO_CONTENT);
    assert_eq!(h.get(&format!("/runs/{id}")).await.status(), StatusCode::NOT_FOUND);
    assert!(!h.runs_dir.join(&id).exists());
    assert_eq!(h.get("/runs/nope/result").await.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invalid_requests_are_rejected_with_the_offending_field() {
    let h = Harness::new().await;

    let mut config = h.config();
    config.schema = "event_type,country,event_type:int".into();
    let resp = h.create(h.form(&config), None).await;
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["field"], "schema");
    assert_eq!(body["schema_field"], "event_type");

    let missing_file = Form::new().text("config", serde_json::to_string(&h.config()).unwrap());
    let resp = h.create(missing_file, None).await;
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(resp.json::<Value>().await.unwrap()["field"], "file");

    let mut config = h.config();
    config.parallelism = 0;
    let resp = h.create(h.form(&config), None).await;
    assert_eq!(resp.json::<Value>().await.unwrap()["field"], "parallelism");

    let no_url = Form::new()
        .text("config", serde_json::to_string(&h.config()).unwrap())
        .part("file", Part::bytes(b"event_type,country\nFlood,Chad\n".to_vec()));
    let resp = h.create(no_url, None).await;
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);

    assert!(h.get("/runs").await.json::<Vec<Value>>().await.unwrap().is_empty());
}

#[tokio::test]
async fn oversized_uploads_are_refused() {
    let h = Harness::start(fx::PageServer::start(), 4 * 1024).await;
    let big = vec![b'x'; 16 * 1024];
    let form = Form::new()
        .text("config", serde_json::to_string(&h.config()).unwrap())
        .part("file", Part::bytes(big).file_name("big.csv"));
    let resp = h.create(form, None).await;
    assert_eq!(resp.status(), StatusCode::PAYLOAD_TOO_LARGE);
    assert!(h.get("/runs").await.json::<Vec<Value>>().await.unwrap().is_empty());
}

#[tokio::test]
async fn concurrent_creates_get_distinct_ids() {
    let h = Arc::new(Harness::new().await);
    let mut config = h.config();
    config.mode = committee_core::orchestrator::Mode::Rules;
    let tasks: Vec<_> = (0..100)
        .map(|_| {
            let h = h.clone();
            let config = config.clone();
            tokio::spawn(async move { h.start_run(&config).await })
        })
        .collect();
    let mut ids = BTreeSet::new();
    for t in tasks {
        ids.insert(t.await.unwrap());
    }
    assert_eq!(ids.len(), 100);
    for id in &ids {
        assert_eq!(h.wait(id).await, "DONE");
    }
    assert_eq!(h.get("/runs").await.json::<Vec<Value>>().await.unwrap().len(), 100);
}

#[tokio::test]
async fn event_streams_replay_then_follow() {
    let h = Harness::start(fx::PageServer::with_delay(Duration::from_millis(30)), 20 * 1024 * 1024).await;
    let id = h.start_run(&h.config()).await;
    let (a, b) = tokio::join!(h.events(&id), h.events(&id));
    assert_eq!(a, b);
    assert!(!a.is_empty());
    assert_eq!(h.wait(&id).await, "DONE");

    let late = h.events(&id).await;
    assert_eq!(late, a);
    let seqs: Vec<u64> = late.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (0..late.len() as u64).collect::<Vec<_>>());
    let terminal: BTreeSet<&str> = late
        .iter()
        .filter(|e| e.status.is_terminal())
        .map(|e| e.row_id.as_str())
        .collect();
    assert_eq!(terminal.len(), fx::INPUT_ROWS + 1);
}

#[tokio::test]
async fn result_and_metrics_match_the_run_directory() {
    let h = Harness::new().await;
    let csv = std::fs::read(&h.files.input).unwrap();
    let gt = std::fs::read(&h.files.ground_truth).unwrap();
    let form = Form::new()
        .text("config", serde_json::to_string(&h.config()).unwrap())
        .part("file", Part::bytes(csv).file_name("input.csv"))
        .part("ground_truth", Part::bytes(gt).file_name("gt.csv"));
    let resp = h.create(form, None).await;
    let id = resp.json::<Value>().await.unwrap()["run_id"].as_str().unwrap().to_string();
    assert_eq!(h.wait(&id).await, "DONE");

    let resp = h.get(&format!("/runs/{id}/result")).await;
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/csv"));
    let csv = resp.text().await.unwrap();
    assert_eq!(csv.lines().next().unwrap(), fx::OUTPUT_HEADER);
    assert_eq!(fx::sorted_data_lines(&csv), fx::expected_output_lines(h.pages.port()));
    let table = committee_core::dataset::read_csv(csv.as_bytes()).unwrap();
    let origins: BTreeSet<&str> = table.rows.iter().map(|r| r["origin"].as_str()).collect();
    assert!(origins.iter().all(|o| ["INITIAL", "REMEDIATED", "DISCOVERED"].contains(o)));
    assert_eq!(std::fs::read_to_string(h.runs_dir.join(&id).join("output.csv")).unwrap(), csv);

    let metrics: Value = h.get(&format!("/runs/{id}/metrics")).await.json().await.unwrap();
    let usage = std::fs::read_to_string(h.runs_dir.join(&id).join("usage.jsonl")).unwrap();
    let ledger: Vec<LedgerEntry> = usage.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let pricing = PricingTable::load(&h.files.pricing).unwrap();
    let expected = estimate_cost(ledger.iter().map(|e| &e.usage), &pricing).total;
    assert_eq!(metrics["totals"]["cost"].as_str().unwrap(), expected.to_string());
    assert_eq!(metrics["totals"]["model_calls"], ledger.len());
    assert_eq!(metrics["final_records"], 9);
    assert_eq!(metrics["evaluation"]["recall"].as_str().unwrap(), "100.0");
}

#[derive(Clone, Default)]
struct SeenAuth(Arc<Mutex<Vec<String>>>);

async fn start_model(seen: SeenAuth) -> SocketAddr {
    let app = Router::new().route(
        "/v1/chat/completions",
        post(move |headers: HeaderMap| {
            let seen = seen.clone();
            async move {
                let auth = headers.get("authorization").map(|v| v.to_str().unwrap().to_string());
                seen.0.lock().unwrap().push(auth.unwrap_or_default());
                Json(json!({
                    "choices": [{"message": {"content": "```json\n{\"is_relevant\": false, \"reason\": \"off topic\"}\n```"}}],
                    "usage": {"prompt_tokens": 10, "completion_tokens": 5}
                }))
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

#[tokio::test]
async fn per_run_credential_reaches_the_provider_but_never_the_disk() {
    const SECRET: &str = "sk-test-7f3a9c1e55d0";
    let seen = SeenAuth::default();
    let model = start_model(seen.clone()).await;
    let h = Harness::new().await;
    let mut config = RunConfig::new(fx::SCHEMA, fx::DESCRIPTION);
    config.provider.endpoint = Some(format!("http://{model}/v1/chat/completions"));
    config.provider.model = Some("mock-model".into());
    config.provider.credential_env = Some("COMMITTEE_TEST_UNSET_KEY".into());
    config.toggles = Toggles {
        context: false,
        ..Toggles::default()
    };

    let resp = h.create(h.form(&config), Some(SECRET)).await;
    let summary: Value = resp.json().await.unwrap();
    assert!(!summary.to_string().contains(SECRET));
    let id = summary["run_id"].as_str().unwrap().to_string();
    assert_eq!(h.wait(&id).await, "DONE");

    let auth = seen.0.lock().unwrap().clone();
    assert_eq!(auth.len(), fx::INPUT_ROWS);
    assert!(auth.iter().all(|a| a == &format!("Bearer {SECRET}")));

    let files = files_under(&h.runs_dir.join(&id));
    assert!(files.iter().any(|f| f.ends_with("report.json")));
    for file in files {
        let bytes = std::fs::read(&file).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(!text.contains(SECRET), "credential written to {}", file.display());
    }
    let listed = h.get(&format!("/runs/{id}")).await.text().await.unwrap();
    assert!(!listed.contains(SECRET));

    // Without a header or environment variable the run fails instead of calling out.
    let resp = h.create(h.form(&config), None).await;
    let id = resp.json::<Value>().await.unwrap()["run_id"].as_str().unwrap().to_string();
    assert_eq!(h.wait(&id).await, "FAILED");
    assert_eq!(seen.0.lock().unwrap().len(), fx::INPUT_ROWS);
}
