//! The single run path shared by the CLI and the HTTP service.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use committee_core::dataset::RawTable;
use committee_core::gateway::{PricingTable, Provider, ScriptedProvider};
use committee_core::orchestrator::rundir::{pages_dir, write_run_dir};
use committee_core::orchestrator::{
    build_provider, prepare_dataset, run, Dataset, EventLog, Mode, RunConfig, RunError, RunReport, Services,
};
use committee_core::remediation::{FixtureSearch, SearchProvider, WebSearch, WebSearchConfig};
use committee_core::retrieval::{FetchConfig, FetchMode};

#[derive(Debug, Clone, Default)]
pub enum SearchSettings {
    /// No search backend: calculation lookups find nothing.
    #[default]
    None,
    Fixture(PathBuf),
    Web(WebSearchConfig),
}

/// Process-wide settings that are not part of a run's configuration.
#[derive(Debug, Clone)]
pub struct Environment {
    pub pricing: PricingTable,
    pub search: SearchSettings,
    /// Host → address overrides for page fetches.
    pub resolve: Vec<(String, SocketAddr)>,
    pub politeness_delay: Duration,
    /// Serve pages from this snapshot directory instead of the network.
    pub replay: Option<PathBuf>,
}

impl Default for Environment {
    fn default() -> Self {
        Self {
            pricing: PricingTable::default(),
            search: SearchSettings::None,
            resolve: Vec::new(),
            politeness_delay: FetchConfig::default().politeness_delay,
            replay: None,
        }
    }
}

pub struct PreparedRun {
    pub dataset: Dataset,
    pub services: Services,
    pub config: RunConfig,
    pub run_dir: PathBuf,
}

impl PreparedRun {
    pub fn events(&self) -> &Arc<EventLog> {
        &self.services.events
    }
}

fn search_provider(settings: &SearchSettings) -> Result<Arc<dyn SearchProvider>, RunError> {
    Ok(match settings {
        SearchSettings::None => Arc::new(FixtureSearch::new()),
        SearchSettings::Fixture(path) => Arc::new(FixtureSearch::from_file(path)?),
        SearchSettings::Web(cfg) => Arc::new(WebSearch::new(cfg.clone(), reqwest::Client::new())),
    })
}

/// Binds the input, builds the provider and per-run services. Nothing is sent
/// to the model yet. `credential` is held in memory only.
pub fn prepare_run(
    table: &RawTable,
    config: &RunConfig,
    credential: Option<String>,
    env: &Environment,
    run_dir: &Path,
    events: Option<Arc<EventLog>>,
) -> Result<PreparedRun, RunError> {
    let dataset = prepare_dataset(table, config)?;
    let mut services = build_services(config, credential, env, run_dir)?;
    if let Some(log) = events {
        services.events = log;
    }
    Ok(PreparedRun {
        dataset,
        services,
        config: config.clone(),
        run_dir: run_dir.to_path_buf(),
    })
}

/// Provider, fetcher, search and event log for one run.
pub fn build_services(
    config: &RunConfig,
    credential: Option<String>,
    env: &Environment,
    run_dir: &Path,
) -> Result<Services, RunError> {
    let provider: Arc<dyn Provider> = match config.mode {
        Mode::Rules => Arc::new(ScriptedProvider::new()),
        _ => build_provider(&config.provider, credential)?,
    };
    let fetch = FetchConfig {
        politeness_delay: env.politeness_delay,
        resolve: env.resolve.clone(),
        mode: match &env.replay {
            Some(dir) => FetchMode::Replay(dir.clone()),
            None => FetchMode::Live,
        },
        snapshot_dir: env.replay.is_none().then(|| pages_dir(run_dir)),
        ..FetchConfig::default()
    };
    Ok(Services::new(provider, config, fetch, search_provider(&env.search)?, env.pricing.clone()))
}

/// Runs to completion and writes the run directory.
pub async fn execute(prepared: PreparedRun) -> Result<RunReport, RunError> {
    let report = run(&prepared.dataset, &prepared.config, &prepared.services).await?;
    write_run_dir(&prepared.run_dir, &report)?;
    Ok(report)
}
