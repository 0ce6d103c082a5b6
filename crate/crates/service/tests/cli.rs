use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use committee_core::gateway::PricingTable;
use committee_core::orchestrator::{ProviderKind, RunConfig};
use committee_fixtures as fx;
use committee_service::exec::{Environment, SearchSettings};
use committee_service::server::{router, AppState, ServerConfig};
use serde_json::Value;

struct Setup {
    pages: fx::PageServer,
    files: fx::FixtureFiles,
    dir: tempfile::TempDir,
}

impl Setup {
    fn new() -> Self {
        let pages = fx::PageServer::start();
        let dir = tempfile::tempdir().unwrap();
        let files = fx::write_files(dir.path(), pages.port()).unwrap();
        Self { pages, files, dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, run_dir: &Path, extra: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_committee"));
        cmd.arg("run")
            .arg("--input")
            .arg(&self.files.input)
            .args(["--schema", fx::SCHEMA, "--description", fx::DESCRIPTION])
            .arg("--fixture")
            .arg(&self.files.scripted)
            .arg("--search-fixture")
            .arg(&self.files.search)
            .arg("--pricing")
            .arg(&self.files.pricing)
            .args(["--politeness-ms", "0", "--quiet"])
            .arg("--run-dir")
            .arg(run_dir);
        for r in self.pages.resolve_args() {
            cmd.args(["--resolve", &r]);
        }
        cmd.args(extra).env_remove("OPENAI_API_KEY").output().unwrap()
    }
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_the_expected_csv() {
    let s = Setup::new();
    let run_dir = s.path("run");
    let out = s.path("out.csv");
    let output = s.run(&run_dir, &["--output", out.to_str().unwrap()]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().next().unwrap(), fx::OUTPUT_HEADER);
    assert_eq!(fx::sorted_data_lines(&csv), fx::expected_output_lines(s.pages.port()));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("final records: 9"), "{stdout}");
    assert!(run_dir.join("pages").is_dir());
}

#[test]
fn usage_errors_exit_with_two() {
    let s = Setup::new();
    let missing = Command::new(env!("CARGO_BIN_EXE_committee"))
        .args(["run", "--input", "/nonexistent/input.csv", "--schema", "a", "--description", "d"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));

    let bad_schema = s.run(&s.path("r"), &["--schema", "a,a"]);
    assert_eq!(bad_schema.status.code(), Some(2));
    let bad_toggle = s.run(&s.path("r"), &["--disable", "astrology"]);
    assert_eq!(bad_toggle.status.code(), Some(2));
    let bad_resolve = s.run(&s.path("r"), &["--resolve", "nohost"]);
    assert_eq!(bad_resolve.status.code(), Some(2));
}

#[test]
fn missing_credential_fails_before_any_call() {
    let s = Setup::new();
    let output = Command::new(env!("CARGO_BIN_EXE_committee"))
        .arg("run")
        .arg("--input")
        .arg(&s.files.input)
        .args(["--schema", fx::SCHEMA, "--description", fx::DESCRIPTION])
        .args(["--provider", "openai", "--credential-env", "COMMITTEE_TEST_UNSET_KEY"])
        .args(["--endpoint", "http://127.0.0.1:9/v1/chat/completions"])
        .arg("--run-dir")
        .arg(s.path("run"))
        .env_remove("COMMITTEE_TEST_UNSET_KEY")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("COMMITTEE_TEST_UNSET_KEY"));
    assert_eq!(s.pages.hits(), 0);
}

#[test]
fn rules_mode_makes_no_model_calls() {
    let s = Setup::new();
    let run_dir = s.path("rules");
    let output = s.run(&run_dir, &["--mode", "rules"]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let usage = std::fs::read_to_string(run_dir.join("usage.jsonl")).unwrap();
    assert_eq!(usage.lines().count(), 0);
    assert_eq!(s.pages.hits(), 0);
    assert_eq!(report(&run_dir)["config"]["mode"], "RULES");
}

#[test]
fn evaluate_and_compare_score_against_ground_truth() {
    let s = Setup::new();
    let run_dir = s.path("run");
    assert!(s.run(&run_dir, &[]).status.success());
    let eval = Command::new(env!("CARGO_BIN_EXE_committee"))
        .arg("evaluate")
        .arg("--run")
        .arg(&run_dir)
        .arg("--ground-truth")
        .arg(&s.files.ground_truth)
        .arg("--json")
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let metrics: Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(metrics["recall"], "100.0");
    assert_eq!(metrics["precision"], "100.0");

    let out_dir = s.path("cmp");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_committee"));
    cmd.arg("compare")
        .arg("--input")
        .arg(&s.files.input)
        .arg("--ground-truth")
        .arg(&s.files.ground_truth)
        .args(["--schema", fx::SCHEMA, "--description", fx::DESCRIPTION])
        .arg("--fixture")
        .arg(&s.files.scripted)
        .arg("--search-fixture")
        .arg(&s.files.search)
        .args(["--politeness-ms", "0", "--variant", "full", "--variant", "no-remediation"])
        .arg("--out-dir")
        .arg(&out_dir);
    for r in s.pages.resolve_args() {
        cmd.args(["--resolve", &r]);
    }
    let cmp = cmd.output().unwrap();
    assert!(cmp.status.success(), "{}", String::from_utf8_lossy(&cmp.stderr));
    for f in ["comparison.json", "comparison.txt", "comparison.svg"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(doc["baseline"], "full");
    assert_eq!(doc["rows"][1]["metrics"]["recall"], "77.8");
}

#[tokio::test(flavor = "multi_thread")]
async fn cli_and_http_produce_the_same_report() {
    let s = Setup::new();
    let cli_dir = s.path("cli-run");
    let output = s.run(&cli_dir, &[]);
    assert!(output.status.success());

    let runs_dir = s.path("runs");
    let app = router(AppState::new(ServerConfig {
        runs_dir: runs_dir.clone(),
        max_upload_bytes: 1 << 20,
        env: Environment {
            pricing: PricingTable::load(&s.files.pricing).unwrap(),
            search: SearchSettings::Fixture(s.files.search.clone()),
            resolve: s.pages.resolve(),
            politeness_delay: Duration::ZERO,
            replay: None,
        },
    }));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });

    let mut config = RunConfig::new(fx::SCHEMA, fx::DESCRIPTION);
    config.provider.kind = ProviderKind::Scripted;
    config.provider.fixture = Some(s.files.scripted.clone());
    let form = reqwest::multipart::Form::new()
        .text("config", serde_json::to_string(&config).unwrap())
        .part("file", reqwest::multipart::Part::bytes(std::fs::read(&s.files.input).unwrap()));
    let http = reqwest::Client::new();
    let created: Value = http.post(format!("{base}/runs")).multipart(form).send().await.unwrap().json().await.unwrap();
    let id = created["run_id"].as_str().unwrap();
    for _ in 0..1500 {
        let doc: Value = http.get(format!("{base}/runs/{id}")).send().await.unwrap().json().await.unwrap();
        if doc["state"] == "DONE" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }

    let a = report(&cli_dir);
    let b = report(&runs_dir.join(id));
    for key in ["records", "status_counts", "dropped", "ledger", "integrity_findings"] {
        let strip = |v: &Value| {
            let mut v = v[key].clone();
            if let Some(entries) = v.as_array_mut() {
                for e in entries.iter_mut() {
                    if let Some(u) = e.get_mut("usage") {
                        u["wall_time"] = Value::Null;
                    }
                }
                // The ledger is in call order, which depends on scheduling.
                entries.sort_by_key(|e| e.to_string());
            }
            v
        };
        assert_eq!(strip(&a), strip(&b), "{key} differs");
    }
    assert_eq!(a["totals"]["cost"], b["totals"]["cost"]);
    assert_eq!(
        std::fs::read_to_string(cli_dir.join("output.csv")).unwrap(),
        std::fs::read_to_string(runs_dir.join(id).join("output.csv")).unwrap()
    );
}
