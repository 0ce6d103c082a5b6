//! Scoring pipeline output against a human-cleaned reference.

mod compare;

use std::collections::BTreeSet;
use std::io::Read;
use std::time::Duration;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use compare::{
    render_chart_svg, render_table, run_comparison, write_comparison, ComparisonReport, ComparisonRow, Delta,
    RunRequest,
};

use crate::dataset::{read_csv, DatasetError, RawTable};
use crate::gateway::duration_ms;
use crate::orchestrator::{RunReport, Totals};
use crate::schema::{coerce_value, DataPoint, FieldType, FieldValue, Origin, SchemaSpec};

/// Marker column in ground-truth files: holds the input row id a row corrects.
pub const REMEDIABLE_COLUMN: &str = "remediable";
pub const ROW_ID_COLUMN: &str = "row_id";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("ground truth has no column for schema field {0:?}")]
    MissingColumn(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub records: Vec<DataPoint>,
    /// Input row ids whose original values were wrong but correctable.
    pub remediable_ids: Option<BTreeSet<String>>,
}

fn truthy(s: &str) -> bool {
    matches!(s.trim().to_ascii_lowercase().as_str(), "1" | "true" | "yes" | "y" | "x")
}

impl GroundTruth {
    /// Binds a reference table to `schema`.
    ///
    /// The optional `remediable` column holds the input row id (`r7`) the
    /// reference row corrects. A truthy marker (`yes`, `1`, …) is also accepted
    /// when the file carries a `row_id` column.
    pub fn from_table(table: &RawTable, schema: &SchemaSpec) -> Result<Self, EvalError> {
        for f in &schema.fields {
            if !table.headers.contains(&f.name) {
                return Err(EvalError::MissingColumn(f.name.clone()));
            }
        }
        let has_marker = table.headers.iter().any(|h| h == REMEDIABLE_COLUMN);
        let mut remediable = BTreeSet::new();
        let mut records = Vec::with_capacity(table.rows.len());
        for (i, row) in table.rows.iter().enumerate() {
            let id = row
                .get(ROW_ID_COLUMN)
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| format!("g{}", i + 1));
            let mut dp = DataPoint::new(id.clone(), "");
            for f in &schema.fields {
                dp.values.insert(f.name.clone(), FieldValue::Text(row[&f.name].clone()));
            }
            if let Some(mark) = row.get(REMEDIABLE_COLUMN).map(|s| s.trim()).filter(|s| !s.is_empty()) {
                if truthy(mark) && row.contains_key(ROW_ID_COLUMN) {
                    remediable.insert(id);
                } else if !truthy(mark) {
                    remediable.insert(mark.to_string());
                }
            }
            records.push(dp);
        }
        Ok(Self {
            records,
            remediable_ids: has_marker.then_some(remediable),
        })
    }

    pub fn from_csv<R: Read>(reader: R, schema: &SchemaSpec) -> Result<Self, EvalError> {
        Self::from_table(&read_csv(reader)?, schema)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchPair {
    pub output: usize,
    pub gt: usize,
}

/// Partial injection between output rows and reference rows, by index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_output: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl MatchResult {
    pub fn output_len(&self) -> usize {
        self.pairs.len() + self.unmatched_output.len()
    }

    pub fn gt_len(&self) -> usize {
        self.pairs.len() + self.unmatched_gt.len()
    }
}

enum Key {
    Blank,
    Date(crate::schema::DateValue),
    Value(String),
}

fn key(dp: &DataPoint, name: &str, ty: FieldType) -> Key {
    let Some(v) = dp.get(name).filter(|v| !v.is_blank()) else {
        return Key::Blank;
    };
    match coerce_value(v, ty) {
        Some(FieldValue::Date(d)) => Key::Date(d),
        Some(FieldValue::Float(d)) => Key::Value(d.normalize().to_string()),
        Some(other) => Key::Value(other.to_string()),
        None => Key::Value(v.to_string().trim().to_string()),
    }
}

/// Exact canonical equality on every field, except dates, which are compared
/// at the coarser of the two precisions.
pub fn records_match(output: &DataPoint, gt: &DataPoint, schema: &SchemaSpec) -> bool {
    schema.fields.iter().all(|f| {
        match (key(output, &f.name, f.field_type), key(gt, &f.name, f.field_type)) {
            (Key::Blank, Key::Blank) => true,
            (Key::Date(a), Key::Date(b)) => a.matches_leniently(&b),
            (Key::Value(a), Key::Value(b)) => a == b,
            (Key::Date(a), Key::Value(b)) | (Key::Value(b), Key::Date(a)) => a.canonical() == b,
            _ => false,
        }
    })
}

/// Greedy matching: each reference row in order takes the first free output row.
pub fn match_records(output: &[DataPoint], gt: &[DataPoint], schema: &SchemaSpec) -> MatchResult {
    let mut taken = vec![false; output.len()];
    let mut result = MatchResult::default();
    for (g, gt_row) in gt.iter().enumerate() {
        let hit = (0..output.len()).find(|&o| !taken[o] && records_match(&output[o], gt_row, schema));
        match hit {
            Some(o) => {
                taken[o] = true;
                result.pairs.push(MatchPair { output: o, gt: g });
            }
            None => result.unmatched_gt.push(g),
        }
    }
    result.unmatched_output = (0..output.len()).filter(|&o| !taken[o]).collect();
    result
}

pub fn round1(d: Decimal) -> Decimal {
    let mut r = d.round_dp_with_strategy(1, RoundingStrategy::MidpointAwayFromZero);
    r.rescale(1);
    r
}

/// 2PR/(P+R) on percentages, unrounded; zero when both are zero.
pub fn f1_score(precision: Decimal, recall: Decimal) -> Decimal {
    let sum = precision + recall;
    if sum.is_zero() {
        Decimal::ZERO
    } else {
        Decimal::TWO * precision * recall / sum
    }
}

fn percent(num: usize, den: usize) -> Decimal {
    if den == 0 {
        Decimal::ZERO
    } else {
        Decimal::from(num) * Decimal::ONE_HUNDRED / Decimal::from(den)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(with = "rust_decimal::serde::str")]
    pub precision: Decimal,
    /// False when the output was empty (precision then reads 0).
    pub precision_applicable: bool,
    #[serde(with = "rust_decimal::serde::str")]
    pub recall: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub f1: Decimal,
    /// None when the reference marks no remediable rows.
    #[serde(with = "rust_decimal::serde::str_option")]
    pub remediation_recall: Option<Decimal>,
    pub matched: usize,
    pub output_rows: usize,
    pub gt_rows: usize,
    #[serde(with = "duration_ms")]
    pub time_total: Duration,
    #[serde(with = "duration_ms")]
    pub latency_mean: Duration,
    #[serde(with = "rust_decimal::serde::str")]
    pub cost_total: Decimal,
}

/// Row-level P/R/F1 and remediation recall, each rounded half away from zero
/// to one decimal. `remediated_ids` are the ids of remediated output rows that
/// matched a reference row.
pub fn compute_metrics(m: &MatchResult, remediated_ids: &BTreeSet<String>, gt: &GroundTruth) -> Metrics {
    let matched = m.pairs.len();
    let output_rows = m.output_len();
    let gt_rows = gt.records.len().max(m.gt_len());
    let p = percent(matched, output_rows);
    let r = percent(matched, gt_rows);
    let rem = gt.remediable_ids.as_ref().filter(|ids| !ids.is_empty()).map(|ids| {
        let hit = ids.iter().filter(|id| remediated_ids.contains(*id)).count();
        round1(percent(hit, ids.len()))
    });
    Metrics {
        precision: round1(p),
        precision_applicable: output_rows > 0,
        recall: round1(r),
        f1: round1(f1_score(p, r)),
        remediation_recall: rem,
        matched,
        output_rows,
        gt_rows,
        time_total: Duration::ZERO,
        latency_mean: Duration::ZERO,
        cost_total: Decimal::ZERO,
    }
}

/// Ids of output rows with REMEDIATED provenance that took part in a match.
pub fn remediated_matched_ids(output: &[DataPoint], m: &MatchResult) -> BTreeSet<String> {
    m.pairs
        .iter()
        .map(|p| &output[p.output])
        .filter(|dp| dp.origin == Origin::Remediated)
        .map(|dp| dp.row_id.clone())
        .collect()
}

pub fn with_totals(mut metrics: Metrics, totals: &Totals) -> Metrics {
    metrics.time_total = totals.time;
    metrics.latency_mean = totals.mean_latency;
    metrics.cost_total = totals.cost;
    metrics
}

/// Scores a finished run against `gt`.
pub fn evaluate_report(report: &RunReport, gt: &GroundTruth) -> Metrics {
    let m = match_records(&report.records, &gt.records, &report.schema);
    let remediated = remediated_matched_ids(&report.records, &m);
    with_totals(compute_metrics(&m, &remediated, gt), &report.totals)
}
