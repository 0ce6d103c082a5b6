use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::debug;

use super::schema_listing;
use crate::gateway::{fit_to_budget, prompts, AgentKind, FieldKind, Gateway, GatewayError, ResponseShape};
use crate::retrieval::PageContent;
use crate::schema::{coerce_record, DataPoint, FieldValue, Origin, SchemaSpec};

fn discovery_shape() -> ResponseShape {
    ResponseShape::new().field("records", FieldKind::List)
}

pub fn discovery_prompt(
    page: &PageContent,
    schema: &SchemaSpec,
    context_fragment: &str,
    known: &[DataPoint],
    page_budget: usize,
) -> String {
    let (markdown, _) = fit_to_budget(&page.markdown, page_budget);
    let known_rows: Vec<Value> = known.iter().map(|dp| dp.values_json(schema)).collect();
    let known_text = if known_rows.is_empty() {
        "(none)".to_string()
    } else {
        serde_json::to_string_pretty(&known_rows).unwrap_or_default()
    };
    prompts::render(
        prompts::DISCOVERY,
        &[
            ("description", &schema.dataset_description),
            ("fields", &schema_listing(schema)),
            ("context", context_fragment),
            ("known", &known_text),
            ("shape", &discovery_shape().describe()),
            ("page", &markdown),
        ],
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedCandidate {
    pub values: Value,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiscoveryOutcome {
    /// Coerced candidates with empty row ids; the caller assigns them.
    pub candidates: Vec<DataPoint>,
    pub dropped: Vec<DroppedCandidate>,
}

/// Canonical comparison key over every schema field.
fn identity(dp: &DataPoint, schema: &SchemaSpec) -> Vec<Option<String>> {
    let coerced = coerce_record(dp, schema).unwrap_or_else(|_| dp.clone());
    schema
        .fields
        .iter()
        .map(|f| coerced.get(&f.name).map(FieldValue::to_string))
        .collect()
}

/// One DISCOVERY call keyed by the page URL. Candidates must coerce cleanly and
/// differ from every known record (and from each other).
pub async fn discover(
    page: &PageContent,
    schema: &SchemaSpec,
    context_fragment: &str,
    known: &[DataPoint],
    page_budget: usize,
    gateway: &Gateway,
) -> Result<DiscoveryOutcome, GatewayError> {
    let prompt = discovery_prompt(page, schema, context_fragment, known, page_budget);
    let value = match gateway
        .complete_structured(AgentKind::Discovery, &page.url, &prompt, &discovery_shape())
        .await
    {
        Ok((v, _)) => v,
        Err(e) if e.is_parse_exhausted() => return Ok(DiscoveryOutcome::default()),
        Err(e) => return Err(e),
    };
    let mut seen: Vec<Vec<Option<String>>> = known.iter().map(|dp| identity(dp, schema)).collect();
    let mut out = DiscoveryOutcome::default();
    for item in value["records"].as_array().into_iter().flatten() {
        let Some(obj) = item.as_object() else {
            out.dropped.push(DroppedCandidate {
                values: item.clone(),
                reason: "not an object".into(),
            });
            continue;
        };
        let mut dp = DataPoint::new("", page.url.clone());
        dp.origin = Origin::Discovered;
        for f in &schema.fields {
            let raw = match obj.get(&f.name) {
                Some(Value::String(s)) => Some(s.clone()),
                Some(Value::Number(n)) => Some(n.to_string()),
                Some(Value::Bool(b)) => Some(b.to_string()),
                _ => None,
            };
            if let Some(raw) = raw {
                dp.values.insert(f.name.clone(), FieldValue::Text(raw));
            }
        }
        let coerced = match coerce_record(&dp, schema) {
            Ok(c) => c,
            Err(e) => {
                debug!(url = %page.url, error = %e, "discovered candidate dropped");
                out.dropped.push(DroppedCandidate {
                    values: item.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let key = identity(&coerced, schema);
        if seen.contains(&key) {
            out.dropped.push(DroppedCandidate {
                values: item.clone(),
                reason: "already known".into(),
            });
            continue;
        }
        seen.push(key);
        out.candidates.push(coerced);
    }
    Ok(out)
}
