//! Dataset adaptation: per-field semantics, negative examples and fallacy
//! illustrations derived once per run from a seeded sample of rows, then
//! rendered into prompt fragments for downstream agents.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::prompts;
use crate::gateway::{AgentKind, FieldKind, Gateway, GatewayError, ResponseShape};
use crate::schema::{DataPoint, SchemaSpec};

pub const SAMPLE_SIZE: usize = 10;
pub const MIN_NEGATIVE_EXAMPLES: usize = 1;
pub const MAX_NEGATIVE_EXAMPLES: usize = 8;
pub const MIN_FALLACY_EXAMPLES: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldContext {
    pub field: String,
    pub entity_description: String,
    pub temporal_description: Option<String>,
    pub negative_examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallacyExample {
    pub scenario: String,
    pub why_wrong: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationalContext {
    pub dataset_description: String,
    /// One entry per schema field, in schema order.
    pub per_field: Vec<FieldContext>,
    pub fallacy_examples: Vec<FallacyExample>,
    pub sample_row_ids: Vec<String>,
    pub rng_seed: u64,
}

impl OperationalContext {
    pub fn field(&self, name: &str) -> Option<&FieldContext> {
        self.per_field.iter().find(|f| f.field == name)
    }

    /// Markdown rendering persisted to the run directory.
    pub fn to_document(&self) -> String {
        let mut out = String::from("# Operational context\n\n");
        let _ = writeln!(out, "Dataset purpose: {}\n", self.dataset_description);
        let _ = writeln!(out, "Seed: {}  ", self.rng_seed);
        let _ = writeln!(out, "Sample rows: {}\n", self.sample_row_ids.join(", "));
        out.push_str("## Fields\n\n");
        for f in &self.per_field {
            write_field(&mut out, f, true, true);
        }
        out.push_str("## Fallacy examples\n\n");
        write_fallacies(&mut out, &self.fallacy_examples);
        out
    }
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("cannot build a context from an empty dataset")]
    EmptyDataset,
    #[error("context response has no usable entry for field {0:?}")]
    MissingField(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Picks `min(10, n)` distinct row indices uniformly at random, seeded.
pub fn sample_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, SAMPLE_SIZE.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

fn response_shape() -> ResponseShape {
    ResponseShape::new()
        .field("fields", FieldKind::Object)
        .field("fallacy_examples", FieldKind::List)
}

const FALLBACK_NEGATIVE: &str =
    "a value of a different entity type or granularity than the one described";

fn fallback_fallacies() -> [FallacyExample; 2] {
    [
        FallacyExample {
            scenario: "The page mentions the value somewhere, so the data point is treated as supported.".into(),
            why_wrong: "A keyword co-occurring on the page is not evidence that the page states the same fact.".into(),
        },
        FallacyExample {
            scenario: "A broader or narrower entity (a region for a country, a month for a day) is accepted as equivalent.".into(),
            why_wrong: "The value must match the granularity the field requires.".into(),
        },
    ]
}

fn text_of(v: Option<&Value>) -> Option<String> {
    v.and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

fn parse_field(name: &str, v: Option<&Value>) -> Result<FieldContext, ContextError> {
    let obj = v
        .and_then(Value::as_object)
        .ok_or_else(|| ContextError::MissingField(name.to_string()))?;
    let entity_description = text_of(obj.get("entity_description"))
        .ok_or_else(|| ContextError::MissingField(name.to_string()))?;
    let mut negative_examples: Vec<String> = obj
        .get("negative_examples")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|x| text_of(Some(x))).collect())
        .unwrap_or_default();
    negative_examples.truncate(MAX_NEGATIVE_EXAMPLES);
    if negative_examples.len() < MIN_NEGATIVE_EXAMPLES {
        negative_examples.push(FALLBACK_NEGATIVE.to_string());
    }
    Ok(FieldContext {
        field: name.to_string(),
        entity_description,
        temporal_description: text_of(obj.get("temporal_description")),
        negative_examples,
    })
}

/// Parses a context-generator reply into an [`OperationalContext`], enforcing its bounds.
pub fn parse_context(
    value: &Value,
    schema: &SchemaSpec,
    sample_row_ids: Vec<String>,
    seed: u64,
) -> Result<OperationalContext, ContextError> {
    let fields = value.get("fields");
    let per_field = schema
        .fields
        .iter()
        .map(|f| parse_field(&f.name, fields.and_then(|m| m.get(&f.name))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut fallacy_examples: Vec<FallacyExample> = value
        .get("fallacy_examples")
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter_map(|x| {
                    Some(FallacyExample {
                        scenario: text_of(x.get("scenario"))?,
                        why_wrong: text_of(x.get("why_wrong"))?,
                    })
                })
                .collect()
        })
        .unwrap_or_default();
    let mut fallbacks = fallback_fallacies().into_iter();
    while fallacy_examples.len() < MIN_FALLACY_EXAMPLES {
        fallacy_examples.push(fallbacks.next().expect("two fallbacks"));
    }
    Ok(OperationalContext {
        dataset_description: schema.dataset_description.clone(),
        per_field,
        fallacy_examples,
        sample_row_ids,
        rng_seed: seed,
    })
}

/// Builds the context prompt. `samples` empty means zero-shot (no example rows).
pub fn context_prompt(schema: &SchemaSpec, samples: &[&DataPoint]) -> String {
    let fields = schema
        .fields
        .iter()
        .map(|f| format!("- {}: {}", f.name, f.field_type))
        .collect::<Vec<_>>()
        .join("\n");
    let sample_text = if samples.is_empty() {
        "(no sample rows provided)".to_string()
    } else {
        samples
            .iter()
            .map(|dp| format!("- {}", dp.values_json(schema)))
            .collect::<Vec<_>>()
            .join("\n")
    };
    prompts::render(
        prompts::CONTEXT_GENERATOR,
        &[
            ("description", &schema.dataset_description),
            ("fields", &fields),
            ("samples", &sample_text),
            ("shape", &response_shape().describe()),
        ],
    )
}

/// Samples rows, issues one CONTEXT_GENERATOR call and parses the reply.
///
/// With `few_shot` off the sample is still drawn (and recorded) but the
/// rows are withheld from the prompt.
pub async fn build_context(
    dataset: &[DataPoint],
    schema: &SchemaSpec,
    seed: u64,
    few_shot: bool,
    gateway: &Gateway,
) -> Result<OperationalContext, ContextError> {
    if dataset.is_empty() {
        return Err(ContextError::EmptyDataset);
    }
    let picked: Vec<&DataPoint> = sample_indices(dataset.len(), seed)
        .into_iter()
        .map(|i| &dataset[i])
        .collect();
    let ids = picked.iter().map(|dp| dp.row_id.clone()).collect();
    let shown: &[&DataPoint] = if few_shot { &picked } else { &[] };
    let prompt = context_prompt(schema, shown);
    let (value, _usage) = gateway
        .complete_structured(AgentKind::ContextGenerator, "context", &prompt, &response_shape())
        .await?;
    parse_context(&value, schema, ids, seed)
}

fn write_field(out: &mut String, f: &FieldContext, temporal: bool, examples: bool) {
    let _ = writeln!(out, "### Field `{}`", f.field);
    let _ = writeln!(out, "Expected entity: {}", f.entity_description);
    if temporal {
        if let Some(t) = &f.temporal_description {
            let _ = writeln!(out, "Temporal context: {t}");
        }
    }
    if examples {
        out.push_str("Avoid:\n");
        for n in &f.negative_examples {
            let _ = writeln!(out, "- {n}");
        }
    }
    out.push('\n');
}

fn write_fallacies(out: &mut String, fallacies: &[FallacyExample]) {
    for (i, fx) in fallacies.iter().enumerate() {
        let _ = writeln!(out, "{}. Scenario: {}", i + 1, fx.scenario);
        let _ = writeln!(out, "   Why it is wrong: {}", fx.why_wrong);
    }
}

fn field_list(names: impl Iterator<Item = String>) -> String {
    names.collect::<Vec<_>>().join(", ")
}

/// Prompt fragment for `target`.
///
/// `include_examples` = false drops negative examples and fallacies
/// (the "no context examples" ablation).
pub fn render_context(ctx: &OperationalContext, target: AgentKind, include_examples: bool) -> String {
    let mut out = String::new();
    match target {
        AgentKind::Relevancy => {
            let _ = writeln!(out, "Dataset purpose: {}", ctx.dataset_description);
            let _ = writeln!(
                out,
                "Schema fields: {}",
                field_list(ctx.per_field.iter().map(|f| f.field.clone()))
            );
        }
        AgentKind::FactCheck => {
            let _ = writeln!(out, "Dataset purpose: {}\n", ctx.dataset_description);
            for f in &ctx.per_field {
                write_field(&mut out, f, true, include_examples);
            }
            if include_examples {
                out.push_str("Fallacies to avoid:\n");
                write_fallacies(&mut out, &ctx.fallacy_examples);
            }
        }
        AgentKind::Discovery
        | AgentKind::RemediationAnalyst
        | AgentKind::RemediationAudit
        | AgentKind::FactLookupExtract => {
            out.push_str("Field rules:\n");
            for f in &ctx.per_field {
                write_field(&mut out, f, false, include_examples);
            }
        }
        AgentKind::Integrity => {
            for f in &ctx.per_field {
                let _ = writeln!(out, "- {}: {}", f.field, f.entity_description);
            }
        }
        AgentKind::ContextGenerator
        | AgentKind::Layout
        | AgentKind::SourceScrutiny
        | AgentKind::Monolith => {}
    }
    out
}

/// Fragment used when the context stage is disabled: only what the schema says.
pub fn render_schema_only(schema: &SchemaSpec, target: AgentKind) -> String {
    match target {
        AgentKind::Relevancy => format!(
            "Dataset purpose: {}\nSchema fields: {}\n",
            schema.dataset_description,
            field_list(schema.field_names().map(str::to_string))
        ),
        AgentKind::Integrity => schema
            .fields
            .iter()
            .map(|f| format!("- {}: a {} value\n", f.name, f.field_type))
            .collect(),
        _ => String::new(),
    }
}

/// Map of field name → entity description, for the integrity stage.
pub fn entity_descriptions(ctx: Option<&OperationalContext>, schema: &SchemaSpec) -> BTreeMap<String, String> {
    schema
        .fields
        .iter()
        .map(|f| {
            let d = ctx
                .and_then(|c| c.field(&f.name))
                .map(|fc| fc.entity_description.clone())
                .unwrap_or_else(|| format!("a {} value", f.field_type));
            (f.name.clone(), d)
        })
        .collect()
}
