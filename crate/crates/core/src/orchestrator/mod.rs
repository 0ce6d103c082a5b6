//! Run driver: dataset preparation, per-row agent sequencing and reporting.

mod baselines;
pub mod config;
pub mod events;
mod pipeline;
pub mod report;
pub mod rundir;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

pub use baselines::{monolith_prompt, CompiledRules, FieldRule, RulePack, RulePackError, DEFAULT_PLACEHOLDERS};
pub use config::{Mode, ProviderKind, ProviderSettings, RunConfig, Toggles, UnknownAblation, ABLATIONS};
pub use events::{EventLog, RowEvent, RowStatus, Stage};
pub use report::{compute_totals, status_counts, RowOutcome, RunReport, Totals};

use crate::context::OperationalContext;
use crate::dataset::{build_dataset, passthrough_columns, read_csv, DatasetError, RawTable};
use crate::finalization::{DroppedRecord, IntegrityFinding};
use crate::gateway::{
    FixtureError, Gateway, GatewayConfig, GatewayError, HttpProvider, HttpProviderConfig, PricingTable, Provider,
    ScriptedProvider,
};
use crate::remediation::{SearchError, SearchProvider};
use crate::retrieval::{FetchConfig, Fetcher};
use crate::schema::{schema_from_annotation, DataPoint, SchemaError, SchemaSpec};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid schema: {0}")]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Rulepack(#[from] RulePackError),
    #[error("model provider failed: {0}")]
    Provider(#[from] GatewayError),
    #[error("scripted provider fixture: {0}")]
    Fixture(#[from] FixtureError),
    #[error("no credential: set {0} or pass one with the request")]
    MissingCredential(String),
    #[error("scripted provider needs a fixture file")]
    MissingFixture,
    #[error("search provider: {0}")]
    Search(#[from] SearchError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Input rows bound to their schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub schema: SchemaSpec,
    pub rows: Vec<DataPoint>,
    pub passthrough: Vec<String>,
    pub url_column: String,
}

/// Infers the schema from the annotation and the table, then binds the rows.
pub fn prepare_dataset(table: &RawTable, config: &RunConfig) -> Result<Dataset, RunError> {
    let schema = schema_from_annotation(&config.schema, &table.rows, &config.description)?;
    let rows = build_dataset(table, &schema, &config.url_column)?;
    Ok(Dataset {
        passthrough: passthrough_columns(table, &schema, &config.url_column),
        schema,
        rows,
        url_column: config.url_column.clone(),
    })
}

pub fn load_dataset(path: &Path, config: &RunConfig) -> Result<Dataset, RunError> {
    let file = std::fs::File::open(path)?;
    prepare_dataset(&read_csv(file)?, config)
}

/// Builds the model provider. `credential` (e.g. from a per-run header) wins over
/// the environment; neither is ever written anywhere.
pub fn build_provider(settings: &ProviderSettings, credential: Option<String>) -> Result<Arc<dyn Provider>, RunError> {
    match settings.kind {
        ProviderKind::Scripted => {
            let path = settings.fixture.as_ref().ok_or(RunError::MissingFixture)?;
            Ok(Arc::new(ScriptedProvider::from_file(path)?))
        }
        ProviderKind::Openai => {
            let mut cfg = HttpProviderConfig::default();
            if let Some(m) = &settings.model {
                cfg.model_id = m.clone();
            }
            if let Some(e) = &settings.endpoint {
                cfg.endpoint = e.clone();
            }
            if let Some(env) = &settings.credential_env {
                cfg.credential_env = env.clone();
            }
            let credential = credential
                .filter(|c| !c.trim().is_empty())
                .or_else(|| std::env::var(&cfg.credential_env).ok().filter(|c| !c.trim().is_empty()));
            match credential {
                Some(c) => Ok(Arc::new(HttpProvider::with_credential(cfg, Some(c)))),
                None => Err(RunError::MissingCredential(cfg.credential_env)),
            }
        }
    }
}

/// Per-run collaborators. The gateway, fetcher and event log belong to one run.
pub struct Services {
    pub gateway: Arc<Gateway>,
    pub fetcher: Arc<Fetcher>,
    pub search: Arc<dyn SearchProvider>,
    pub pricing: PricingTable,
    pub events: Arc<EventLog>,
}

impl Services {
    pub fn new(
        provider: Arc<dyn Provider>,
        config: &RunConfig,
        fetch: FetchConfig,
        search: Arc<dyn SearchProvider>,
        pricing: PricingTable,
    ) -> Self {
        let gateway = Gateway::new(
            provider,
            GatewayConfig {
                max_repairs: config.max_repairs,
                ..GatewayConfig::default()
            },
        );
        Self {
            gateway: Arc::new(gateway),
            fetcher: Arc::new(Fetcher::new(fetch)),
            search,
            pricing,
            events: EventLog::new(),
        }
    }
}

/// Output of the finalization stage shared by all modes.
pub(crate) struct Finalized {
    pub records: Vec<DataPoint>,
    pub dropped: Vec<DroppedRecord>,
    pub findings: Vec<IntegrityFinding>,
    pub warnings: Vec<String>,
    pub context: Option<OperationalContext>,
}

/// Runs `dataset` in the configured mode. The event log is closed on return,
/// whether the run succeeded or not.
pub async fn run(dataset: &Dataset, config: &RunConfig, services: &Services) -> Result<RunReport, RunError> {
    let started = Instant::now();
    let result = match config.mode {
        Mode::Committee => pipeline::run_committee(dataset, config, services).await,
        Mode::Monolith => baselines::run_monolith(dataset, config, services).await,
        Mode::Rules => baselines::run_rules(dataset, config, services).await,
    };
    services.events.close();
    let (outcomes, fin) = result?;
    let ledger = services.gateway.ledger().snapshot();
    let fetches = services.fetcher.transcript();
    let totals = compute_totals(started.elapsed(), &outcomes, &ledger, fetches.len(), &services.pricing);
    Ok(RunReport {
        config: config.clone(),
        schema: dataset.schema.clone(),
        model_id: services.gateway.model_id().to_string(),
        url_column: dataset.url_column.clone(),
        passthrough_columns: dataset.passthrough.clone(),
        status_counts: status_counts(&outcomes),
        outcomes,
        records: fin.records,
        dropped: fin.dropped,
        integrity_findings: fin.findings,
        totals,
        warnings: fin.warnings,
        context: fin.context,
        events: services.events.snapshot(),
        ledger,
        fetches,
    })
}
