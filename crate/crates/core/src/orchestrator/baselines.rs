//! Single-agent and rule-based comparison modes.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use futures::{stream, StreamExt};
use regex::Regex;
use rust_decimal::prelude::ToPrimitive;
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use super::events::{RowStatus, Stage};
use super::report::RowOutcome;
use super::{Dataset, Finalized, RunError, Services};
use crate::finalization::{dedup, integrity_check};
use crate::gateway::{fit_to_budget, prompts, AgentKind, FieldKind, GatewayError, ResponseShape};
use crate::remediation::schema_listing;
use crate::schema::{coerce_record, coerce_value, DataPoint, FieldValue, Origin, SchemaSpec};

use super::config::RunConfig;

fn monolith_shape() -> ResponseShape {
    ResponseShape::new()
        .field("verdict", FieldKind::Text)
        .optional("corrected_values", FieldKind::Object)
        .optional("notes", FieldKind::Text)
}

pub fn monolith_prompt(dp: &DataPoint, schema: &SchemaSpec, markdown: &str, page_budget: usize) -> (String, bool) {
    let (page, truncated) = fit_to_budget(markdown, page_budget);
    let row = serde_json::to_string_pretty(&dp.values_json(schema)).unwrap_or_default();
    let prompt = prompts::render(
        prompts::MONOLITH,
        &[
            ("description", &schema.dataset_description),
            ("fields", &schema_listing(schema)),
            ("row", &row),
            ("shape", &monolith_shape().describe()),
            ("page", if page.trim().is_empty() { "(page could not be retrieved)" } else { &page }),
        ],
    );
    (prompt, truncated)
}

fn json_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Applies a monolith reply to `dp`. Returns the coerced record and whether
/// any value changed, or the rejection reason.
fn apply_monolith(dp: &DataPoint, schema: &SchemaSpec, reply: &Value) -> Result<(DataPoint, bool), String> {
    let verdict = reply["verdict"].as_str().unwrap_or_default().trim().to_ascii_uppercase();
    let notes = reply["notes"].as_str().unwrap_or_default().trim();
    if verdict != "ACCEPT" {
        return Err(if notes.is_empty() {
            format!("MONOLITH: verdict {verdict}")
        } else {
            format!("MONOLITH: {notes}")
        });
    }
    let mut corrected = dp.clone();
    if let Some(map) = reply["corrected_values"].as_object() {
        for (field, value) in map {
            if schema.field(field).is_some() {
                corrected.values.insert(field.clone(), FieldValue::Text(json_text(value)));
            }
        }
    }
    let record = coerce_record(&corrected, schema).map_err(|e| format!("FORMAT: {e}"))?;
    let changed = match coerce_record(dp, schema) {
        Ok(original) => original.values != record.values,
        Err(_) => true,
    };
    Ok((record, changed))
}

async fn monolith_row(dp: &DataPoint, dataset: &Dataset, config: &RunConfig, services: &Services) -> RowOutcome {
    let started = Instant::now();
    let mut out = RowOutcome::new(dp);
    let events = &services.events;
    events.push(&dp.row_id, Stage::Queued, RowStatus::Processing, None, None);
    let page = services.fetcher.fetch_page(&dp.source_url).await;
    events.push(
        &dp.row_id,
        Stage::Fetch,
        RowStatus::Processing,
        Some(format!("HTTP {}", page.http_status)),
        None,
    );
    let (prompt, truncated) = monolith_prompt(dp, &dataset.schema, &page.markdown, config.page_budget);
    out.page_truncated = truncated || page.truncated;
    out.status = RowStatus::Reject;
    match services
        .gateway
        .complete_structured(AgentKind::Monolith, &dp.row_id, &prompt, &monolith_shape())
        .await
    {
        Ok((reply, _)) => match apply_monolith(dp, &dataset.schema, &reply) {
            Ok((mut record, changed)) => {
                if changed {
                    record.origin = Origin::Remediated;
                    out.status = RowStatus::Remediated;
                } else {
                    out.status = RowStatus::Accept;
                }
                out.record = Some(record);
            }
            Err(reason) => out.reasons = vec![reason],
        },
        Err(e @ GatewayError::ParseExhausted { .. }) => out.reasons = vec![format!("MONOLITH: {e}")],
        Err(e) => {
            out.processing_failure = true;
            out.reasons = vec![format!("processing failure: {e}")];
        }
    }
    out.latency = started.elapsed();
    let usage = services
        .gateway
        .ledger()
        .usage_for(AgentKind::Monolith, &dp.row_id, services.gateway.model_id());
    events.push(
        &dp.row_id,
        Stage::Monolith,
        out.status,
        Some(out.reasons.join("; ")).filter(|r| !r.is_empty()),
        Some(usage),
    );
    out
}

async fn finalize_without_agents(
    outcomes: &[RowOutcome],
    dataset: &Dataset,
    services: &Services,
) -> Result<Finalized, RunError> {
    let staged: Vec<DataPoint> = outcomes.iter().filter_map(|o| o.record.clone()).collect();
    let deduped = dedup(&staged, &dataset.schema);
    let checked = integrity_check(deduped.kept, &dataset.schema, "", false, &services.gateway).await?;
    let mut dropped = deduped.dropped;
    dropped.extend(checked.rejected);
    Ok(Finalized {
        records: checked.accepted,
        dropped,
        findings: checked.findings,
        warnings: checked.warnings,
        context: None,
    })
}

/// One fetch and one model call per row, with no discovery or context.
pub(super) async fn run_monolith(
    dataset: &Dataset,
    config: &RunConfig,
    services: &Services,
) -> Result<(Vec<RowOutcome>, Finalized), RunError> {
    let rows = &dataset.rows;
    let outcomes: Vec<RowOutcome> = stream::iter(0..rows.len())
        .map(|i| monolith_row(&rows[i], dataset, config, services))
        .buffered(config.parallelism.max(1))
        .collect()
        .await;
    let fin = finalize_without_agents(&outcomes, dataset, services).await?;
    Ok((outcomes, fin))
}

// ---- rules ----

pub const DEFAULT_PLACEHOLDERS: &[&str] = &[
    "n/a", "na", "none", "null", "nil", "unknown", "tbd", "tba", "todo", "-", "--", "?", "??", "xxx", "placeholder",
    "lorem ipsum",
];

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldRule {
    /// Regex the raw value must match (searched, so anchor it if needed).
    #[serde(default)]
    pub pattern: Option<String>,
    #[serde(default)]
    pub required: Option<bool>,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
    /// Case-insensitive whitelist.
    #[serde(default)]
    pub allowed: Option<Vec<String>>,
    #[serde(default)]
    pub max_length: Option<usize>,
}

/// Declarative per-field rules for the deterministic baseline.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulePack {
    /// Replaces the built-in placeholder list when given.
    #[serde(default)]
    pub placeholders: Option<Vec<String>>,
    #[serde(default)]
    pub fields: BTreeMap<String, FieldRule>,
}

#[derive(Debug, Error)]
pub enum RulePackError {
    #[error("cannot read rule pack: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid TOML rule pack: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid JSON rule pack: {0}")]
    Json(#[from] serde_json::Error),
    #[error("rule for unknown field {0:?}")]
    UnknownField(String),
    #[error("bad pattern for field {field:?}: {error}")]
    BadPattern { field: String, error: String },
    #[error("min is greater than max for field {0:?}")]
    BadBounds(String),
    #[error("numeric bounds on non-numeric field {0:?}")]
    BoundsOnText(String),
}

impl RulePack {
    pub fn parse_toml(text: &str) -> Result<Self, RulePackError> {
        Ok(toml::from_str(text)?)
    }

    pub fn parse_json(text: &str) -> Result<Self, RulePackError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Loads a `.json` pack as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, RulePackError> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::parse_json(&text)
        } else {
            Self::parse_toml(&text)
        }
    }

    pub fn compile(&self, schema: &SchemaSpec) -> Result<CompiledRules, RulePackError> {
        let mut rules = Vec::new();
        for (name, rule) in &self.fields {
            let spec = schema
                .field(name)
                .ok_or_else(|| RulePackError::UnknownField(name.clone()))?;
            let pattern = rule
                .pattern
                .as_deref()
                .map(Regex::new)
                .transpose()
                .map_err(|e| RulePackError::BadPattern {
                    field: name.clone(),
                    error: e.to_string(),
                })?;
            if (rule.min.is_some() || rule.max.is_some()) && !spec.field_type.is_numeric() {
                return Err(RulePackError::BoundsOnText(name.clone()));
            }
            if let (Some(lo), Some(hi)) = (rule.min, rule.max) {
                if lo > hi {
                    return Err(RulePackError::BadBounds(name.clone()));
                }
            }
            rules.push((
                name.clone(),
                CompiledRule {
                    pattern,
                    rule: rule.clone(),
                },
            ));
        }
        let placeholders = match &self.placeholders {
            Some(p) => p.iter().map(|s| s.trim().to_lowercase()).collect(),
            None => DEFAULT_PLACEHOLDERS.iter().map(|s| s.to_string()).collect(),
        };
        Ok(CompiledRules { rules, placeholders })
    }
}

#[derive(Debug, Clone)]
struct CompiledRule {
    pattern: Option<Regex>,
    rule: FieldRule,
}

#[derive(Debug, Clone)]
pub struct CompiledRules {
    rules: Vec<(String, CompiledRule)>,
    placeholders: Vec<String>,
}

impl CompiledRules {
    /// Type, completeness and placeholder checks only.
    pub fn generic() -> Self {
        Self {
            rules: Vec::new(),
            placeholders: DEFAULT_PLACEHOLDERS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// The coerced record, or every violated rule.
    pub fn check(&self, dp: &DataPoint, schema: &SchemaSpec) -> Result<DataPoint, Vec<String>> {
        let mut problems = Vec::new();
        let url_ok = url::Url::parse(&dp.source_url)
            .is_ok_and(|u| matches!(u.scheme(), "http" | "https") && u.host().is_some());
        if !url_ok {
            problems.push("INVALID_URL".to_string());
        }
        let raw = |name: &str| dp.get(name).map(FieldValue::to_string).unwrap_or_default();
        for f in &schema.fields {
            let value = raw(&f.name);
            let value = value.trim();
            let rule = self.rules.iter().find(|(n, _)| n == &f.name).map(|(_, r)| r);
            if value.is_empty() {
                if rule.and_then(|r| r.rule.required).unwrap_or(f.required) {
                    problems.push(format!("MISSING: {}", f.name));
                }
                continue;
            }
            if self.placeholders.iter().any(|p| p == &value.to_lowercase()) {
                problems.push(format!("PLACEHOLDER: {}", f.name));
                continue;
            }
            let Some(typed) = coerce_value(&FieldValue::text(value), f.field_type) else {
                problems.push(format!("TYPE: {} is not a valid {}", f.name, f.field_type));
                continue;
            };
            let Some(r) = rule else { continue };
            if let Some(p) = &r.pattern {
                if !p.is_match(value) {
                    problems.push(format!("PATTERN: {}", f.name));
                }
            }
            if let Some(allowed) = &r.rule.allowed {
                if !allowed.iter().any(|a| a.trim().eq_ignore_ascii_case(value)) {
                    problems.push(format!("NOT_ALLOWED: {}", f.name));
                }
            }
            if let Some(max_len) = r.rule.max_length {
                if value.chars().count() > max_len {
                    problems.push(format!("TOO_LONG: {}", f.name));
                }
            }
            let number = match &typed {
                FieldValue::Integer(i) => Some(*i as f64),
                FieldValue::Float(d) => d.to_f64(),
                _ => None,
            };
            if let Some(n) = number {
                if r.rule.min.is_some_and(|lo| n < lo) || r.rule.max.is_some_and(|hi| n > hi) {
                    problems.push(format!("OUT_OF_RANGE: {}", f.name));
                }
            }
        }
        if !problems.is_empty() {
            return Err(problems);
        }
        coerce_record(dp, schema).map_err(|e| vec![format!("FORMAT: {e}")])
    }
}

/// Deterministic checks only: no model calls and no fetches.
pub(super) async fn run_rules(
    dataset: &Dataset,
    config: &RunConfig,
    services: &Services,
) -> Result<(Vec<RowOutcome>, Finalized), RunError> {
    let rules = match &config.rulepack {
        Some(path) => RulePack::load(path)?.compile(&dataset.schema)?,
        None => CompiledRules::generic(),
    };
    let mut outcomes = Vec::with_capacity(dataset.rows.len());
    for dp in &dataset.rows {
        let started = Instant::now();
        let mut out = RowOutcome::new(dp);
        services
            .events
            .push(&dp.row_id, Stage::Queued, RowStatus::Processing, None, None);
        match rules.check(dp, &dataset.schema) {
            Ok(record) => {
                out.status = RowStatus::Accept;
                out.record = Some(record);
            }
            Err(problems) => {
                out.status = RowStatus::Reject;
                out.reasons = problems;
            }
        }
        out.latency = started.elapsed();
        services.events.push(
            &dp.row_id,
            Stage::Rules,
            out.status,
            Some(out.reasons.join("; ")).filter(|r| !r.is_empty()),
            None,
        );
        outcomes.push(out);
    }
    let fin = finalize_without_agents(&outcomes, dataset, services).await?;
    Ok((outcomes, fin))
}
