//! `committee` command line.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use futures::StreamExt;

use committee_core::dataset::read_csv;
use committee_core::evaluation::{
    evaluate_report, render_table, run_comparison, write_comparison, ComparisonReport, GroundTruth, Metrics,
    RunRequest,
};
use committee_core::gateway::PricingTable;
use committee_core::orchestrator::rundir::read_report;
use committee_core::orchestrator::{Mode, ProviderKind, RunConfig, RunReport, Toggles};
use committee_core::remediation::WebSearchConfig;

use crate::exec::{build_services, execute, prepare_run, Environment, SearchSettings};
use crate::server::{serve, ServerConfig, DEFAULT_MAX_UPLOAD_BYTES};

/// Exit status for usage errors (bad flags, missing input).
pub const EXIT_USAGE: u8 = 2;
/// Exit status for a run that started but failed.
pub const EXIT_FAILURE: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "committee", version, about = "Validate, repair and extend web-sourced tabular datasets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline over a CSV file.
    Run(RunArgs),
    /// Score a finished run against a ground-truth CSV.
    Evaluate(EvaluateArgs),
    /// Run several configurations and tabulate them against a ground truth.
    Compare(CompareArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EnvArgs {
    /// Pricing table (TOML) used for cost estimates.
    #[arg(long)]
    pub pricing: Option<PathBuf>,
    /// JSON file mapping search queries to result URLs.
    #[arg(long, conflicts_with = "search_url")]
    pub search_fixture: Option<PathBuf>,
    /// Search endpoint URL template with `{query}` (and optionally `{key}`).
    #[arg(long)]
    pub search_url: Option<String>,
    /// Route a host to a fixed address, as HOST=IP:PORT. Repeatable.
    #[arg(long, value_name = "HOST=ADDR")]
    pub resolve: Vec<String>,
    /// Minimum delay between requests to one host, in milliseconds.
    #[arg(long, default_value_t = 1000)]
    pub politeness_ms: u64,
    /// Serve pages from a snapshot directory instead of the network.
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Run configuration document (JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated `name[:type]` list (types: text, int, float, date).
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long)]
    pub description: Option<String>,
    #[arg(long)]
    pub url_column: Option<String>,
    /// `openai` or `scripted`.
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Environment variable holding the provider credential.
    #[arg(long)]
    pub credential_env: Option<String>,
    /// Scripted provider fixture (JSON).
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// `committee`, `monolith` or `rules`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Named ablation preset (e.g. `no-remediation`).
    #[arg(long)]
    pub ablation: Option<String>,
    /// Turn one agent off (e.g. `--disable discovery`). Repeatable.
    #[arg(long)]
    pub disable: Vec<String>,
    /// Rule pack for `--mode rules` (TOML or JSON).
    #[arg(long)]
    pub rulepack: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Input CSV.
    #[arg(long, short)]
    pub input: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Where to copy the final CSV.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Where to copy the report document.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Run directory (default: runs/<timestamp>).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Do not print live status lines.
    #[arg(long, short)]
    pub quiet: bool,
    #[command(flatten)]
    pub env: EnvArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory or report.json of a finished run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Print the metrics document as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Configurations to run: ablation names, `monolith` or `rules`. The first
    /// is the baseline. Repeatable; defaults to `full`.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// Directory for the comparison report, table and chart.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Run configurations concurrently (timings become unreliable).
    #[arg(long)]
    pub concurrent: bool,
    #[command(flatten)]
    pub env: EnvArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD_BYTES / (1024 * 1024))]
    pub max_upload_mb: usize,
    #[command(flatten)]
    pub env: EnvArgs,
}

/// A problem with the invocation rather than with the run.
#[derive(Debug)]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

impl EnvArgs {
    pub fn environment(&self) -> Result<Environment, UsageError> {
        let pricing = match &self.pricing {
            Some(p) => PricingTable::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
            None => PricingTable::default(),
        };
        let search = match (&self.search_fixture, &self.search_url) {
            (Some(p), _) => SearchSettings::Fixture(p.clone()),
            (None, Some(u)) => SearchSettings::Web(WebSearchConfig::new(u.clone())),
            (None, None) => SearchSettings::None,
        };
        let resolve = self
            .resolve
            .iter()
            .map(|r| {
                let (host, addr) = r
                    .split_once('=')
                    .ok_or_else(|| usage(format!("--resolve expects HOST=IP:PORT, got {r:?}")))?;
                let addr: SocketAddr = addr
                    .parse()
                    .map_err(|_| usage(format!("--resolve: bad address {addr:?}")))?;
                Ok((host.to_string(), addr))
            })
            .collect::<Result<Vec<_>, UsageError>>()?;
        if let Some(dir) = &self.replay {
            if !dir.is_dir() {
                return Err(usage(format!("replay directory {} does not exist", dir.display())));
            }
        }
        Ok(Environment {
            pricing,
            search,
            resolve,
            politeness_delay: Duration::from_millis(self.politeness_ms),
            replay: self.replay.clone(),
        })
    }
}

/// Switches one named agent toggle off.
pub fn disable_toggle(toggles: &mut Toggles, name: &str) -> Result<(), UsageError> {
    let key = name.trim().replace('-', "_").to_ascii_lowercase();
    let mut doc = serde_json::to_value(*toggles).expect("toggles serialize");
    let map = doc.as_object_mut().expect("toggles are an object");
    if !map.contains_key(&key) {
        let known: Vec<&str> = map.keys().map(String::as_str).collect();
        return Err(usage(format!("unknown agent {name:?}; expected one of {}", known.join(", "))));
    }
    map.insert(key, serde_json::Value::Bool(false));
    *toggles = serde_json::from_value(doc).expect("toggles deserialize");
    Ok(())
}

impl ConfigArgs {
    pub fn run_config(&self) -> Result<RunConfig, UsageError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?
            }
            None => {
                let schema = self.schema.clone().ok_or_else(|| usage("--schema is required (or --config)"))?;
                let description = self
                    .description
                    .clone()
                    .ok_or_else(|| usage("--description is required (or --config)"))?;
                RunConfig::new(schema, description)
            }
        };
        if let Some(s) = &self.schema {
            cfg.schema = s.clone();
        }
        if let Some(d) = &self.description {
            cfg.description = d.clone();
        }
        if let Some(c) = &self.url_column {
            cfg.url_column = c.clone();
        }
        if let Some(p) = &self.provider {
            cfg.provider.kind = match p.to_ascii_lowercase().as_str() {
                "openai" => ProviderKind::Openai,
                "scripted" => ProviderKind::Scripted,
                other => return Err(usage(format!("unknown provider {other:?} (expected openai or scripted)"))),
            };
        }
        if self.model.is_some() {
            cfg.provider.model = self.model.clone();
        }
        if self.endpoint.is_some() {
            cfg.provider.endpoint = self.endpoint.clone();
        }
        if self.credential_env.is_some() {
            cfg.provider.credential_env = self.credential_env.clone();
        }
        if let Some(f) = &self.fixture {
            cfg.provider.fixture = Some(f.clone());
            if self.provider.is_none() {
                cfg.provider.kind = ProviderKind::Scripted;
            }
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.parallelism {
            if p == 0 {
                return Err(usage("--parallelism must be at least 1"));
            }
            cfg.parallelism = p;
        }
        if let Some(m) = &self.mode {
            cfg.mode = m.parse::<Mode>().map_err(usage)?;
        }
        if let Some(a) = &self.ablation {
            cfg.toggles = Toggles::ablation(a).map_err(|e| usage(e.to_string()))?;
            if cfg.label.is_none() {
                cfg.label = Some(a.clone());
            }
        }
        for name in &self.disable {
            disable_toggle(&mut cfg.toggles, name)?;
        }
        if self.rulepack.is_some() {
            cfg.rulepack = self.rulepack.clone();
        }
        if self.label.is_some() {
            cfg.label = self.label.clone();
        }
        committee_core::schema::schema_from_annotation(&cfg.schema, &[], &cfg.description)
            .map_err(|e| usage(format!("invalid --schema: {e}")))?;
        Ok(cfg)
    }
}

fn default_run_dir() -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let short = uuid::Uuid::new_v4().simple().to_string();
    PathBuf::from("runs").join(format!("{stamp}-{}", &short[..8]))
}

fn print_summary(report: &RunReport, run_dir: &Path) {
    let counts: Vec<String> = report
        .status_counts
        .iter()
        .map(|(s, n)| format!("{s}={n}"))
        .collect();
    let t = &report.totals;
    println!("rows: {}", counts.join(" "));
    println!(
        "final records: {}  dropped: {}  model calls: {}  fetches: {}",
        report.records.len(),
        report.dropped.len(),
        t.model_calls,
        t.fetches
    );
    println!(
        "time: {:.1}s  mean latency: {:.1}s  cost: ${}",
        t.time.as_secs_f64(),
        t.mean_latency.as_secs_f64(),
        t.cost.round_dp(4)
    );
    if !t.unpriced_models.is_empty() {
        let names: Vec<&str> = t.unpriced_models.iter().map(String::as_str).collect();
        println!("unpriced models (costed at 0): {}", names.join(", "));
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    println!("run directory: {}", run_dir.display());
}

async fn cmd_run(args: RunArgs) -> Result<ExitCode, UsageError> {
    if !args.input.is_file() {
        return Err(usage(format!("input file {} not found", args.input.display())));
    }
    let config = args.config.run_config()?;
    let env = args.env.environment()?;
    let table = std::fs::File::open(&args.input)
        .map_err(|e| usage(format!("cannot open {}: {e}", args.input.display())))
        .and_then(|f| read_csv(f).map_err(|e| usage(format!("{}: {e}", args.input.display()))))?;
    let run_dir = args.run_dir.clone().unwrap_or_else(default_run_dir);

    let prepared = match prepare_run(&table, &config, None, &env, &run_dir, None) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(EXIT_FAILURE));
        }
    };
    let printer = (!args.quiet).then(|| {
        let mut events = prepared.events().subscribe().boxed();
        tokio::spawn(async move {
            while let Some(e) = events.next().await {
                println!("{}", e.status_line());
            }
        })
    });
    let result = execute(prepared).await;
    if let Some(p) = printer {
        let _ = p.await;
    }
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: run failed: {e}");
            return Ok(ExitCode::from(EXIT_FAILURE));
        }
    };
    let copy = |from: &str, to: &Option<PathBuf>| -> std::io::Result<()> {
        if let Some(to) = to {
            std::fs::copy(run_dir.join(from), to)?;
        }
        Ok(())
    };
    if let Err(e) = copy("output.csv", &args.output).and_then(|_| copy("report.json", &args.report)) {
        eprintln!("error: cannot write outputs: {e}");
        return Ok(ExitCode::from(EXIT_FAILURE));
    }
    print_summary(&report, &run_dir);
    Ok(ExitCode::SUCCESS)
}

fn print_metrics(m: &Metrics) {
    let p = if m.precision_applicable {
        m.precision.to_string()
    } else {
        format!("{} (no output)", m.precision)
    };
    println!("precision: {p}");
    println!("recall:    {}", m.recall);
    println!("f1:        {}", m.f1);
    match m.remediation_recall {
        Some(r) => println!("remediation recall: {r}"),
        None => println!("remediation recall: n/a"),
    }
    println!("matched {} of {} output rows and {} reference rows", m.matched, m.output_rows, m.gt_rows);
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode, UsageError> {
    let dir = if args.run.is_dir() {
        args.run.clone()
    } else {
        args.run.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let report = if args.run.is_file() {
        std::fs::read_to_string(&args.run)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<RunReport>(&t).map_err(|e| e.to_string()))
    } else {
        read_report(&dir).map_err(|e| e.to_string())
    }
    .map_err(|e| usage(format!("cannot read run report from {}: {e}", args.run.display())))?;
    let file = std::fs::File::open(&args.ground_truth)
        .map_err(|e| usage(format!("cannot open {}: {e}", args.ground_truth.display())))?;
    let gt = GroundTruth::from_csv(file, &report.schema).map_err(|e| usage(e.to_string()))?;
    let metrics = evaluate_report(&report, &gt);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    } else {
        print_metrics(&metrics);
    }
    Ok(ExitCode::SUCCESS)
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

/// The configuration for one named comparison variant.
pub fn variant_config(base: &RunConfig, variant: &str) -> Result<RunConfig, UsageError> {
    let mut cfg = base.clone();
    cfg.label = Some(variant.to_string());
    match variant.parse::<Mode>() {
        Ok(Mode::Committee) | Err(_) => {
            cfg.mode = Mode::Committee;
            cfg.toggles = Toggles::ablation(variant).map_err(|e| usage(e.to_string()))?;
        }
        Ok(mode) => cfg.mode = mode,
    }
    Ok(cfg)
}

async fn cmd_compare(args: CompareArgs) -> Result<ExitCode, UsageError> {
    for f in [&args.input, &args.ground_truth] {
        if !f.is_file() {
            return Err(usage(format!("file {} not found", f.display())));
        }
    }
    let base = args.config.run_config()?;
    let env = args.env.environment()?;
    let read = |p: &Path| {
        std::fs::File::open(p)
            .map_err(|e| e.to_string())
            .and_then(|f| read_csv(f).map_err(|e| e.to_string()))
            .map_err(|e| usage(format!("{}: {e}", p.display())))
    };
    let input = read(&args.input)?;
    let gt = read(&args.ground_truth)?;
    let variants = if args.variants.is_empty() {
        vec!["full".to_string()]
    } else {
        args.variants.clone()
    };
    let mut requests = Vec::new();
    for v in &variants {
        let config = variant_config(&base, v)?;
        let dir = args.out_dir.join(slug(v));
        let services = build_services(&config, None, &env, &dir);
        requests.push(RunRequest { config, services });
    }
    let report: ComparisonReport = run_comparison(&input, &gt, requests, args.concurrent).await;
    print!("{}", render_table(&report));
    if let Err(e) = write_comparison(&args.out_dir, &report) {
        eprintln!("error: cannot write comparison: {e}");
        return Ok(ExitCode::from(EXIT_FAILURE));
    }
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    })
}

async fn cmd_serve(args: ServeArgs) -> Result<ExitCode, UsageError> {
    let config = ServerConfig {
        runs_dir: args.runs_dir.clone(),
        max_upload_bytes: args.max_upload_mb * 1024 * 1024,
        env: args.env.environment()?,
    };
    match serve(args.addr, config).await {
        Ok(()) => Ok(ExitCode::SUCCESS),
        Err(e) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(EXIT_FAILURE))
        }
    }
}

pub async fn dispatch(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Run(a) => cmd_run(a).await,
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a).await,
        Command::Serve(a) => cmd_serve(a).await,
    };
    match result {
        Ok(code) => code,
        Err(UsageError(msg)) => {
            eprintln!("error: {msg}\n\nRun `committee --help` for usage.");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("committee").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_build_a_config() {
        let cli = parse(&[
            "run",
            "--input",
            "x.csv",
            "--schema",
            "event_type,affected:int",
            "--description",
            "disasters",
            "--fixture",
            "f.json",
            "--parallelism",
            "8",
            "--mode",
            "monolith",
            "--disable",
            "source-scrutiny",
            "--disable",
            "discovery",
        ]);
        let Command::Run(args) = cli.command else { panic!("expected run") };
        let cfg = args.config.run_config().unwrap();
        assert_eq!(cfg.provider.kind, ProviderKind::Scripted);
        assert_eq!(cfg.parallelism, 8);
        assert_eq!(cfg.mode, Mode::Monolith);
        assert!(!cfg.toggles.source_scrutiny && !cfg.toggles.discovery && cfg.toggles.remediation);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let mut t = Toggles::default();
        assert!(disable_toggle(&mut t, "telepathy").is_err());
        let cli = parse(&["run", "--input", "x.csv", "--schema", "a,a", "--description", "d"]);
        let Command::Run(args) = cli.command else { panic!("expected run") };
        assert!(args.config.run_config().unwrap_err().0.contains("duplicate"));
        assert!(Cli::try_parse_from(["committee", "run"]).is_err());
        let env = EnvArgs {
            pricing: None,
            search_fixture: None,
            search_url: None,
            resolve: vec!["news.test".into()],
            politeness_ms: 0,
            replay: None,
        };
        assert!(env.environment().is_err());
    }

    #[test]
    fn variants() {
        let base = RunConfig::new("a", "d");
        assert_eq!(variant_config(&base, "rules").unwrap().mode, Mode::Rules);
        let v = variant_config(&base, "No Remediation").unwrap();
        assert_eq!(v.mode, Mode::Committee);
        assert!(!v.toggles.remediation);
        assert_eq!(v.label.as_deref(), Some("No Remediation"));
        assert!(variant_config(&base, "bogus").is_err());
    }
}
