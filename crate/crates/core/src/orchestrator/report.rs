use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::events::{RowEvent, RowStatus};
use crate::context::OperationalContext;
use crate::finalization::{DroppedRecord, IntegrityFinding};
use crate::gateway::{estimate_cost, duration_ms, LedgerEntry, PricingTable};
use crate::remediation::RemediationOutcome;
use crate::retrieval::{FetchRecord, LayoutClass};
use crate::schema::{DataPoint, SchemaSpec};
use crate::validators::{FactCheckReport, SourceAssessment, Verdict};

/// Everything known about one row after validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowOutcome {
    pub row_id: String,
    pub source_url: String,
    pub status: RowStatus,
    pub reasons: Vec<String>,
    /// Provider or transport failure rather than a judgment.
    #[serde(default)]
    pub processing_failure: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<LayoutClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceAssessment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact_check: Option<FactCheckReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remediation: Option<RemediationOutcome>,
    /// The record staged for finalization, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<DataPoint>,
    #[serde(with = "duration_ms")]
    pub latency: Duration,
    #[serde(default)]
    pub page_truncated: bool,
}

impl RowOutcome {
    pub fn new(dp: &DataPoint) -> Self {
        Self {
            row_id: dp.row_id.clone(),
            source_url: dp.source_url.clone(),
            status: RowStatus::Processing,
            reasons: Vec::new(),
            processing_failure: false,
            layout: None,
            source: None,
            fact_check: None,
            verdict: None,
            remediation: None,
            record: None,
            latency: Duration::ZERO,
            page_truncated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    #[serde(with = "duration_ms")]
    pub time: Duration,
    #[serde(with = "duration_ms")]
    pub mean_latency: Duration,
    #[serde(with = "rust_decimal::serde::str")]
    pub cost: Decimal,
    pub unpriced_models: BTreeSet<String>,
    pub model_calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub fetches: usize,
    pub processing_failures: usize,
    pub truncated_pages: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub schema: SchemaSpec,
    pub model_id: String,
    pub url_column: String,
    pub passthrough_columns: Vec<String>,
    pub outcomes: Vec<RowOutcome>,
    /// Final records: input rows in input order, then discovered rows.
    pub records: Vec<DataPoint>,
    pub dropped: Vec<DroppedRecord>,
    pub integrity_findings: Vec<IntegrityFinding>,
    pub status_counts: BTreeMap<RowStatus, usize>,
    pub totals: Totals,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<OperationalContext>,
    pub events: Vec<RowEvent>,
    pub ledger: Vec<LedgerEntry>,
    pub fetches: Vec<FetchRecord>,
}

impl RunReport {
    pub fn status_of(&self, row_id: &str) -> Option<RowStatus> {
        self.outcomes.iter().find(|o| o.row_id == row_id).map(|o| o.status)
    }

    /// Row ids with terminal status `status`, in outcome order.
    pub fn rows_with(&self, status: RowStatus) -> Vec<&str> {
        self.outcomes
            .iter()
            .filter(|o| o.status == status)
            .map(|o| o.row_id.as_str())
            .collect()
    }

    pub fn output_csv(&self) -> String {
        crate::dataset::to_csv_string(&self.records, &self.schema, &self.passthrough_columns, &self.url_column)
    }
}

pub fn status_counts(outcomes: &[RowOutcome]) -> BTreeMap<RowStatus, usize> {
    let mut counts = BTreeMap::new();
    for o in outcomes {
        *counts.entry(o.status).or_insert(0) += 1;
    }
    counts
}

pub fn compute_totals(
    elapsed: Duration,
    outcomes: &[RowOutcome],
    ledger: &[LedgerEntry],
    fetches: usize,
    pricing: &PricingTable,
) -> Totals {
    let estimate = estimate_cost(ledger.iter().map(|e| &e.usage), pricing);
    let mean_latency = if outcomes.is_empty() {
        Duration::ZERO
    } else {
        outcomes.iter().map(|o| o.latency).sum::<Duration>() / outcomes.len() as u32
    };
    Totals {
        time: elapsed,
        mean_latency,
        cost: estimate.total,
        unpriced_models: estimate.unpriced_models,
        model_calls: ledger.len(),
        prompt_tokens: ledger.iter().map(|e| e.usage.prompt_tokens).sum(),
        completion_tokens: ledger.iter().map(|e| e.usage.completion_tokens).sum(),
        fetches,
        processing_failures: outcomes.iter().filter(|o| o.processing_failure).count(),
        truncated_pages: outcomes.iter().filter(|o| o.page_truncated).count(),
    }
}
