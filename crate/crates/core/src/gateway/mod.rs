//! The single choke point for model calls.
//!
//! Every call goes through [`Gateway`], which bounds in-flight requests,
//! applies the per-call timeout, parses a structured reply (with up to
//! [`DEFAULT_MAX_REPAIRS`] repair re-prompts) and appends each attempt to
//! the run's [`UsageLedger`].

mod http;
mod pricing;
pub mod prompts;
mod scripted;
mod structured;

pub use http::{HttpProvider, HttpProviderConfig};
pub use pricing::{estimate_cost, CostEstimate, ModelRates, PricingTable};
pub use scripted::{FixtureError, ScriptedProvider};
pub use structured::{extract_structured, FieldKind, ResponseShape, ShapeError};

use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub const DEFAULT_MAX_REPAIRS: u32 = 2;
pub const DEFAULT_CALL_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_IN_FLIGHT: usize = 8;
pub const DEFAULT_PAGE_BUDGET_CHARS: usize = 40_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AgentKind {
    ContextGenerator,
    Relevancy,
    Layout,
    SourceScrutiny,
    FactCheck,
    RemediationAnalyst,
    FactLookupExtract,
    RemediationAudit,
    Discovery,
    Integrity,
    Monolith,
}

impl AgentKind {
    pub const ALL: [AgentKind; 11] = [
        AgentKind::ContextGenerator,
        AgentKind::Relevancy,
        AgentKind::Layout,
        AgentKind::SourceScrutiny,
        AgentKind::FactCheck,
        AgentKind::RemediationAnalyst,
        AgentKind::FactLookupExtract,
        AgentKind::RemediationAudit,
        AgentKind::Discovery,
        AgentKind::Integrity,
        AgentKind::Monolith,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::ContextGenerator => "CONTEXT_GENERATOR",
            AgentKind::Relevancy => "RELEVANCY",
            AgentKind::Layout => "LAYOUT",
            AgentKind::SourceScrutiny => "SOURCE_SCRUTINY",
            AgentKind::FactCheck => "FACT_CHECK",
            AgentKind::RemediationAnalyst => "REMEDIATION_ANALYST",
            AgentKind::FactLookupExtract => "FACT_LOOKUP_EXTRACT",
            AgentKind::RemediationAudit => "REMEDIATION_AUDIT",
            AgentKind::Discovery => "DISCOVERY",
            AgentKind::Integrity => "INTEGRITY",
            AgentKind::Monolith => "MONOLITH",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(with = "duration_ms")]
    pub wall_time: Duration,
    pub model_id: String,
}

impl CallUsage {
    pub fn zero(model_id: impl Into<String>) -> Self {
        Self {
            prompt_tokens: 0,
            completion_tokens: 0,
            wall_time: Duration::ZERO,
            model_id: model_id.into(),
        }
    }

    pub fn absorb(&mut self, other: &CallUsage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.wall_time += other.wall_time;
    }
}

pub(crate) mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// What a provider is asked to complete.
#[derive(Debug, Clone)]
pub struct ModelRequest {
    pub kind: AgentKind,
    /// Logical call key (row id, URL, domain...). Scripted fixtures are keyed on it.
    pub key: String,
    pub prompt: String,
    /// 0 for the first try, then 1..=R for repair re-prompts.
    pub attempt: u32,
}

#[derive(Debug, Clone)]
pub struct ModelReply {
    pub text: String,
    pub usage: CallUsage,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication error: {0}")]
    Auth(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("call timed out after {0:?}")]
    Timeout(Duration),
    #[error("no scripted response for {kind}:{key}")]
    MissingFixture { kind: AgentKind, key: String },
    #[error("malformed provider payload: {0}")]
    Payload(String),
}

#[async_trait]
pub trait Provider: Send + Sync {
    async fn complete(&self, request: &ModelRequest) -> Result<ModelReply, ProviderError>;
    fn model_id(&self) -> &str;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{kind} response unparseable after {attempts} attempts: {last_error}")]
    ParseExhausted {
        kind: AgentKind,
        attempts: u32,
        last_error: String,
    },
}

impl GatewayError {
    pub fn is_parse_exhausted(&self) -> bool {
        matches!(self, GatewayError::ParseExhausted { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub kind: AgentKind,
    pub key: String,
    pub attempt: u32,
    pub usage: CallUsage,
}

/// Append-only, concurrency-safe record of every model call in a run.
#[derive(Debug, Default)]
pub struct UsageLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, entry: LedgerEntry) {
        self.entries.lock().expect("ledger poisoned").push(entry);
    }

    pub fn snapshot(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("ledger poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, kind: AgentKind) -> usize {
        self.entries
            .lock()
            .expect("ledger poisoned")
            .iter()
            .filter(|e| e.kind == kind)
            .count()
    }

    /// Summed usage of every call (including repairs) made for `kind` / `key`.
    pub fn usage_for(&self, kind: AgentKind, key: &str, model_id: &str) -> CallUsage {
        let mut total = CallUsage::zero(model_id);
        for e in self.entries.lock().expect("ledger poisoned").iter() {
            if e.kind == kind && e.key == key {
                total.absorb(&e.usage);
            }
        }
        total
    }

    pub fn count_key(&self, kind: AgentKind, key: &str) -> usize {
        self.entries
            .lock()
            .expect("ledger poisoned")
            .iter()
            .filter(|e| e.kind == kind && e.key == key)
            .count()
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub max_repairs: u32,
    pub call_timeout: Duration,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            max_repairs: DEFAULT_MAX_REPAIRS,
            call_timeout: DEFAULT_CALL_TIMEOUT,
            max_in_flight: DEFAULT_IN_FLIGHT,
        }
    }
}

/// Per-run gateway. The provider may be shared; the ledger belongs to the run.
pub struct Gateway {
    provider: Arc<dyn Provider>,
    config: GatewayConfig,
    ledger: Arc<UsageLedger>,
    in_flight: Semaphore,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>, config: GatewayConfig) -> Self {
        let permits = config.max_in_flight.max(1);
        Self {
            provider,
            config,
            ledger: Arc::new(UsageLedger::new()),
            in_flight: Semaphore::new(permits),
        }
    }

    pub fn ledger(&self) -> &Arc<UsageLedger> {
        &self.ledger
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    async fn call(&self, request: &ModelRequest) -> Result<ModelReply, ProviderError> {
        let _permit = self.in_flight.acquire().await.expect("semaphore closed");
        let started = Instant::now();
        let result = tokio::time::timeout(self.config.call_timeout, self.provider.complete(request))
            .await
            .map_err(|_| ProviderError::Timeout(self.config.call_timeout))?;
        let mut reply = result?;
        if reply.usage.wall_time.is_zero() && reply.usage.model_id != scripted::SCRIPTED_MODEL {
            reply.usage.wall_time = started.elapsed();
        }
        self.ledger.record(LedgerEntry {
            kind: request.kind,
            key: request.key.clone(),
            attempt: request.attempt,
            usage: reply.usage.clone(),
        });
        Ok(reply)
    }

    /// Requests a structured reply matching `shape`, re-prompting on parse failure.
    pub async fn complete_structured(
        &self,
        kind: AgentKind,
        key: &str,
        prompt: &str,
        shape: &ResponseShape,
    ) -> Result<(serde_json::Value, CallUsage), GatewayError> {
        let mut total = CallUsage::zero(self.provider.model_id());
        let mut current_prompt = prompt.to_string();
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_repairs {
            let request = ModelRequest {
                kind,
                key: key.to_string(),
                prompt: current_prompt.clone(),
                attempt,
            };
            let reply = self.call(&request).await?;
            total.absorb(&reply.usage);
            match extract_structured(&reply.text, shape) {
                Ok(value) => return Ok((value, total)),
                Err(e) => {
                    last_error = e.to_string();
                    current_prompt = prompts::repair_prompt(prompt, &reply.text, &last_error);
                }
            }
        }
        Err(GatewayError::ParseExhausted {
            kind,
            attempts: self.config.max_repairs + 1,
            last_error,
        })
    }

    /// [`Gateway::complete_structured`] followed by deserialization into `T`.
    pub async fn complete_as<T: DeserializeOwned>(
        &self,
        kind: AgentKind,
        key: &str,
        prompt: &str,
        shape: &ResponseShape,
    ) -> Result<(T, CallUsage), GatewayError> {
        let (value, usage) = self.complete_structured(kind, key, prompt, shape).await?;
        let parsed = serde_json::from_value(value).map_err(|e| GatewayError::ParseExhausted {
            kind,
            attempts: 1,
            last_error: e.to_string(),
        })?;
        Ok((parsed, usage))
    }
}

/// Caps `text` at `budget` characters keeping the head (3/4) and the tail (1/4).
pub fn fit_to_budget(text: &str, budget: usize) -> (String, bool) {
    let total = text.chars().count();
    if total <= budget {
        return (text.to_string(), false);
    }
    let head = budget * 3 / 4;
    let tail = budget - head;
    let head_part: String = text.chars().take(head).collect();
    let tail_part: String = text.chars().skip(total - tail).collect();
    (format!("{head_part}\n\n[... content truncated ...]\n\n{tail_part}"), true)
}
