//! Hierarchical deduplication and the final integrity gate.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::warn;

use crate::gateway::{prompts, AgentKind, FieldKind, Gateway, GatewayError, ResponseShape};
use crate::schema::{normalize_date, DataPoint, DatePrecision, DateValue, FieldValue, SchemaSpec};

/// Records per INTEGRITY call.
pub const INTEGRITY_BATCH: usize = 25;

/// Injective encoding of a tuple of field values.
///
/// Each value escapes `\` and `|`; values are joined by `|`; an absent value
/// is `\-`, a sequence escaping can never produce.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fingerprint(pub String);

impl Fingerprint {
    pub fn encode<'a>(values: impl IntoIterator<Item = Option<&'a str>>) -> Self {
        let parts: Vec<String> = values
            .into_iter()
            .map(|v| match v {
                Some(s) => s.replace('\\', "\\\\").replace('|', "\\|"),
                None => "\\-".to_string(),
            })
            .collect();
        Fingerprint(parts.join("|"))
    }

    /// Fingerprint over all non-date schema fields (all fields if the schema has no date).
    pub fn of(dp: &DataPoint, schema: &SchemaSpec) -> Self {
        let date = schema.date_field().map(|f| f.name.as_str());
        let values: Vec<Option<String>> = schema
            .fields
            .iter()
            .filter(|f| Some(f.name.as_str()) != date)
            .map(|f| dp.get(&f.name).map(FieldValue::to_string))
            .collect();
        Self::encode(values.iter().map(Option::as_deref))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DropReason {
    FilteredIncomplete,
    Duplicate,
    Integrity,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::FilteredIncomplete => "FILTERED_INCOMPLETE",
            DropReason::Duplicate => "DUPLICATE",
            DropReason::Integrity => "INTEGRITY",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub record: DataPoint,
    pub reason: DropReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DedupResult {
    pub kept: Vec<DataPoint>,
    pub dropped: Vec<DroppedRecord>,
}

fn is_missing(dp: &DataPoint, field: &str) -> bool {
    dp.get(field).is_none_or(FieldValue::is_blank)
}

fn date_of(v: &FieldValue) -> Option<DateValue> {
    match v {
        FieldValue::Date(d) => Some(d.clone()),
        FieldValue::Text(s) => normalize_date(s).ok(),
        _ => None,
    }
}

/// Keep-first deduplication in one left-to-right pass.
///
/// Each dated record is checked only against the seen-set of its own date
/// precision. Records without a date (optional date field left empty) share
/// a separate undated set.
pub fn dedup(records: &[DataPoint], schema: &SchemaSpec) -> DedupResult {
    let date_field = schema.date_field().map(|f| f.name.clone());
    let mut seen: [HashSet<(Fingerprint, String)>; 3] = Default::default();
    let mut undated: HashSet<Fingerprint> = HashSet::new();
    let mut out = DedupResult::default();

    for dp in records {
        if let Some(f) = schema.fields.iter().find(|f| f.required && is_missing(dp, &f.name)) {
            out.dropped.push(DroppedRecord {
                record: dp.clone(),
                reason: DropReason::FilteredIncomplete,
                detail: format!("required field {} is empty", f.name),
            });
            continue;
        }
        let fingerprint = Fingerprint::of(dp, schema);
        let fresh = match &date_field {
            None => undated.insert(fingerprint),
            Some(name) => match dp.get(name).filter(|v| !v.is_blank()) {
                None => undated.insert(fingerprint),
                Some(v) => {
                    let Some(date) = date_of(v) else {
                        out.dropped.push(DroppedRecord {
                            record: dp.clone(),
                            reason: DropReason::FilteredIncomplete,
                            detail: format!("{name} is not a recognizable date"),
                        });
                        continue;
                    };
                    let slot = match date.precision() {
                        DatePrecision::Day => 0,
                        DatePrecision::Month => 1,
                        DatePrecision::Year => 2,
                    };
                    seen[slot].insert((fingerprint, date.canonical().to_string()))
                }
            },
        };
        if fresh {
            out.kept.push(dp.clone());
        } else {
            out.dropped.push(DroppedRecord {
                record: dp.clone(),
                reason: DropReason::Duplicate,
                detail: "an earlier record has the same fingerprint at this date precision".into(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntegrityRule {
    Completeness,
    Plausibility,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityFinding {
    pub row_id: String,
    pub rule: IntegrityRule,
    pub field: String,
    pub explanation: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IntegrityResult {
    pub accepted: Vec<DataPoint>,
    pub findings: Vec<IntegrityFinding>,
    pub rejected: Vec<DroppedRecord>,
    /// Chunks whose reply could not be parsed (passed through unchecked).
    pub warnings: Vec<String>,
}

fn integrity_shape() -> ResponseShape {
    ResponseShape::new().field("findings", FieldKind::List)
}

pub fn integrity_prompt(chunk: &[DataPoint], schema: &SchemaSpec, field_descriptions: &str) -> String {
    let records: Vec<Value> = chunk
        .iter()
        .map(|dp| {
            let mut v = dp.values_json(schema);
            if let Value::Object(map) = &mut v {
                map.insert("row_id".into(), Value::String(dp.row_id.clone()));
            }
            v
        })
        .collect();
    prompts::render(
        prompts::INTEGRITY,
        &[
            ("fields", field_descriptions),
            ("records", &serde_json::to_string_pretty(&records).unwrap_or_default()),
            ("shape", &integrity_shape().describe()),
        ],
    )
}

fn parse_findings(v: &Value, chunk: &[DataPoint]) -> Vec<IntegrityFinding> {
    let mut out = Vec::new();
    for item in v["findings"].as_array().into_iter().flatten() {
        let row_id = item["row_id"].as_str().unwrap_or_default().trim().to_string();
        if !chunk.iter().any(|dp| dp.row_id == row_id) {
            continue;
        }
        let rule = match item["rule"].as_str().unwrap_or_default().trim().to_ascii_uppercase().as_str() {
            "COMPLETENESS" => IntegrityRule::Completeness,
            _ => IntegrityRule::Plausibility,
        };
        let mut explanation = item["explanation"].as_str().unwrap_or_default().trim().to_string();
        if explanation.is_empty() {
            explanation = "flagged without explanation".into();
        }
        out.push(IntegrityFinding {
            row_id,
            rule,
            field: item["field"].as_str().unwrap_or_default().trim().to_string(),
            explanation,
        });
    }
    out
}

/// Completeness deterministically, then plausibility in batches of
/// [`INTEGRITY_BATCH`] (calls keyed `chunk-{i}`, checked concurrently).
/// `plausibility = false` skips the model entirely.
pub async fn integrity_check(
    records: Vec<DataPoint>,
    schema: &SchemaSpec,
    field_descriptions: &str,
    plausibility: bool,
    gateway: &Gateway,
) -> Result<IntegrityResult, GatewayError> {
    let mut result = IntegrityResult::default();
    let mut complete = Vec::new();
    for dp in records {
        let missing: Vec<&str> = schema
            .fields
            .iter()
            .filter(|f| f.required && is_missing(&dp, &f.name))
            .map(|f| f.name.as_str())
            .collect();
        if missing.is_empty() {
            complete.push(dp);
            continue;
        }
        for field in &missing {
            result.findings.push(IntegrityFinding {
                row_id: dp.row_id.clone(),
                rule: IntegrityRule::Completeness,
                field: field.to_string(),
                explanation: format!("required field {field} is empty"),
            });
        }
        result.rejected.push(DroppedRecord {
            detail: format!("COMPLETENESS: {}", missing.join(", ")),
            record: dp,
            reason: DropReason::Integrity,
        });
    }
    if !plausibility || complete.is_empty() {
        result.accepted = complete;
        return Ok(result);
    }

    let chunks: Vec<&[DataPoint]> = complete.chunks(INTEGRITY_BATCH).collect();
    let calls = chunks.iter().enumerate().map(|(i, chunk)| async move {
        let prompt = integrity_prompt(chunk, schema, field_descriptions);
        let key = format!("chunk-{i}");
        match gateway
            .complete_structured(AgentKind::Integrity, &key, &prompt, &integrity_shape())
            .await
        {
            Ok((v, _)) => Ok((parse_findings(&v, chunk), None)),
            Err(e) if e.is_parse_exhausted() => {
                warn!(chunk = i, "integrity reply unparseable; chunk passes unchecked");
                Ok((Vec::new(), Some(format!("{key}: unparseable integrity reply, passed unchecked"))))
            }
            Err(e) => Err(e),
        }
    });
    let replies = futures::future::join_all(calls).await;
    let mut flagged = HashSet::new();
    for reply in replies {
        let (findings, warning) = reply?;
        result.warnings.extend(warning);
        for f in findings {
            flagged.insert(f.row_id.clone());
            result.findings.push(f);
        }
    }
    for dp in complete {
        if flagged.contains(&dp.row_id) {
            let detail = result
                .findings
                .iter()
                .filter(|f| f.row_id == dp.row_id)
                .map(|f| format!("{:?} {}: {}", f.rule, f.field, f.explanation))
                .collect::<Vec<_>>()
                .join("; ");
            result.rejected.push(DroppedRecord {
                record: dp,
                reason: DropReason::Integrity,
                detail,
            });
        } else {
            result.accepted.push(dp);
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, ScriptedProvider};
    use crate::schema::{coerce_record, FieldSpec, FieldType};
    use serde_json::json;
    use std::sync::Arc;

    fn schema() -> SchemaSpec {
        SchemaSpec::new(
            vec![
                FieldSpec::new("name", FieldType::Text),
                FieldSpec::new("place", FieldType::Text),
                FieldSpec::new("date", FieldType::Date),
            ],
            "events",
        )
        .unwrap()
    }

    fn rec(id: &str, name: &str, date: &str) -> DataPoint {
        let dp = DataPoint::new(id, "https://x.test/")
            .with("name", name)
            .with("place", "Haiti")
            .with("date", date);
        coerce_record(&dp, &schema()).unwrap()
    }

    fn ids(v: &[DataPoint]) -> Vec<&str> {
        v.iter().map(|d| d.row_id.as_str()).collect()
    }

    #[test]
    fn named_cases() {
        let s = schema();
        assert_eq!(dedup(&[], &s), DedupResult::default());
        let r = dedup(&[rec("a", "quake", "2024-03-05"), rec("b", "quake", "2024-03")], &s);
        assert_eq!(ids(&r.kept), ["a", "b"]);
        let r = dedup(&[rec("a", "quake", "2024-03-05"), rec("b", "quake", "2024-03-05")], &s);
        assert_eq!(ids(&r.kept), ["a"]);
        assert_eq!(r.dropped[0].reason, DropReason::Duplicate);
        let r = dedup(&[rec("a", "quake", "2024-03-05"), rec("b", "quake", "2024-03-12")], &s);
        assert_eq!(ids(&r.kept), ["a", "b"]);

        let flat = SchemaSpec::new(vec![FieldSpec::new("name", FieldType::Text)], "d").unwrap();
        let a = DataPoint::new("a", "u").with("name", "x");
        let b = DataPoint::new("b", "u").with("name", "x");
        assert_eq!(ids(&dedup(&[a, b], &flat).kept), ["a"]);
    }

    #[test]
    fn incomplete_records_are_filtered_first() {
        let s = schema();
        let mut holey = rec("a", "quake", "2024-03-05");
        holey.values.remove("place");
        let r = dedup(&[holey, rec("b", "quake", "2024-03-05")], &s);
        assert_eq!(ids(&r.kept), ["b"]);
        assert_eq!(r.dropped[0].reason, DropReason::FilteredIncomplete);

        let mut bad_date = rec("c", "storm", "2024");
        bad_date.values.insert("date".into(), FieldValue::text("sometime"));
        assert_eq!(dedup(&[bad_date], &s).dropped[0].reason, DropReason::FilteredIncomplete);
    }

    #[test]
    fn fingerprint_escaping_is_injective() {
        let a = Fingerprint::encode([Some("a|b"), Some("c")]);
        let b = Fingerprint::encode([Some("a"), Some("b|c")]);
        let c = Fingerprint::encode([Some("a\\"), Some("|c")]);
        let d = Fingerprint::encode([None, Some("c")]);
        let e = Fingerprint::encode([Some("\\-"), Some("c")]);
        let all = [a, b, c, d, e];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    fn gateway(fixture: Value) -> Gateway {
        Gateway::new(Arc::new(ScriptedProvider::from_json(&fixture).unwrap()), GatewayConfig::default())
    }

    #[tokio::test]
    async fn integrity_plausibility_and_completeness() {
        let s = SchemaSpec::new(
            vec![
                FieldSpec::new("victim_name", FieldType::Text),
                FieldSpec::new("city", FieldType::Text),
            ],
            "victims",
        )
        .unwrap();
        let ok = DataPoint::new("r1", "u").with("victim_name", "Jean Pierre").with("city", "Jacmel");
        let nonsense = DataPoint::new("r2", "u").with("victim_name", "42").with("city", "Jacmel");
        let empty = DataPoint::new("r3", "u").with("victim_name", "").with("city", "Jacmel");
        let gw = gateway(json!({
            "INTEGRITY:chunk-0": {"findings": [
                {"row_id": "r2", "rule": "PLAUSIBILITY", "field": "victim_name", "explanation": "a number is not a person's name"},
                {"row_id": "zz", "rule": "PLAUSIBILITY", "field": "city", "explanation": "unknown row"}
            ]}
        }));
        let r = integrity_check(vec![ok, nonsense, empty], &s, "- victim_name: a person's name\n", true, &gw)
            .await
            .unwrap();
        assert_eq!(ids(&r.accepted), ["r1"]);
        assert_eq!(r.findings.len(), 2);
        assert!(r.findings.iter().any(|f| f.row_id == "r3" && f.rule == IntegrityRule::Completeness));
        assert!(r.findings.iter().any(|f| f.row_id == "r2" && f.rule == IntegrityRule::Plausibility));
        assert_eq!(gw.ledger().count(AgentKind::Integrity), 1);
        let prompt = integrity_prompt(&r.accepted, &s, "");
        assert!(!prompt.contains("\"r3\""));
    }

    #[tokio::test]
    async fn integrity_batches_and_fails_open() {
        let s = schema();
        let recs: Vec<DataPoint> = (0..60).map(|i| rec(&format!("r{i}"), "quake", "2024")).collect();
        let gw = gateway(json!({"INTEGRITY:chunk-1": "cannot answer", "INTEGRITY:*": {"findings": []}}));
        let r = integrity_check(recs, &s, "", true, &gw).await.unwrap();
        assert_eq!(r.accepted.len(), 60);
        assert_eq!(gw.ledger().count_key(AgentKind::Integrity, "chunk-0"), 1);
        assert_eq!(gw.ledger().count_key(AgentKind::Integrity, "chunk-2"), 1);
        assert_eq!(r.warnings.len(), 1);
        let gw = gateway(json!({}));
        let r = integrity_check(vec![rec("a", "q", "2024")], &s, "", false, &gw).await.unwrap();
        assert_eq!(r.accepted.len(), 1);
        assert!(gw.ledger().is_empty());
    }
}
