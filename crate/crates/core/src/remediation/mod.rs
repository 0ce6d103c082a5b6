//! Self-correction of rejected rows (plan, lookup, apply, audit) and
//! discovery of further rows on already fetched pages.

mod discovery;
mod formula;
mod search;

pub use discovery::{discover, discovery_prompt, DiscoveryOutcome, DroppedCandidate};
pub use formula::{EvalError, Formula, FormulaError};
pub use search::{FixtureSearch, SearchError, SearchProvider, WebSearch, WebSearchConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{fit_to_budget, prompts, AgentKind, FieldKind, Gateway, GatewayError, ResponseShape};
use crate::retrieval::{Fetcher, PageContent};
use crate::schema::{coerce_record, parse_decimal, DataPoint, FieldType, FieldValue, Origin, SchemaSpec};
use crate::validators::Verdict;

/// Result pages consulted per lookup.
pub const LOOKUP_BREADTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    DirectReplacement,
    Calculation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupRequest {
    pub operand: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemediationPlan {
    pub strategy: Strategy,
    pub target_fields: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub replacements: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lookups: Vec<LookupRequest>,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactLookupResult {
    pub operand: String,
    pub value: Decimal,
    pub source_url: String,
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub approved: bool,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("analyst declared the row unfixable: {0}")]
    Unfixable(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("plan invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LookupError {
    #[error("empty lookup query for {0}")]
    EmptyQuery(String),
    #[error("search failed: {0}")]
    Search(String),
    #[error("no figure for {operand} in {pages} result page(s)")]
    NotFound { operand: String, pages: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error("formula: {0}")]
    Formula(String),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("corrected record invalid: {0}")]
    Invalid(String),
}

fn text(v: &Value, key: &str) -> String {
    v.get(key)
        .and_then(Value::as_str)
        .map(str::trim)
        .unwrap_or_default()
        .to_string()
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

pub fn schema_listing(schema: &SchemaSpec) -> String {
    schema
        .fields
        .iter()
        .map(|f| format!("- {}: {}", f.name, f.field_type))
        .collect::<Vec<_>>()
        .join("\n")
}

// ---- plan ----

fn plan_shape() -> ResponseShape {
    ResponseShape::new()
        .field("strategy", FieldKind::Text)
        .optional("target_fields", FieldKind::List)
        .optional("replacements", FieldKind::Object)
        .optional("formula", FieldKind::Text)
        .optional("lookups", FieldKind::List)
        .optional("justification", FieldKind::Text)
}

/// Parses the analyst's reply and enforces the plan invariants against the schema.
pub fn parse_plan(v: &Value, schema: &SchemaSpec) -> Result<RemediationPlan, PlanError> {
    let raw_strategy = text(v, "strategy");
    let justification = {
        let j = text(v, "justification");
        if j.is_empty() {
            "no justification given".to_string()
        } else {
            j
        }
    };
    let strategy = match raw_strategy.to_ascii_uppercase().replace([' ', '-'], "_").as_str() {
        "DIRECT_REPLACEMENT" => Strategy::DirectReplacement,
        "CALCULATION" => Strategy::Calculation,
        "UNFIXABLE" | "NONE" => return Err(PlanError::Unfixable(justification)),
        _ => return Err(PlanError::UnknownStrategy(raw_strategy)),
    };

    let mut target_fields: Vec<String> = v
        .get("target_fields")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(scalar_string).filter(|s| !s.is_empty()).collect())
        .unwrap_or_default();

    let mut replacements = BTreeMap::new();
    if let Some(obj) = v.get("replacements").and_then(Value::as_object) {
        for (field, value) in obj {
            let value = scalar_string(value)
                .ok_or_else(|| PlanError::Invalid(format!("replacement for {field} is not a scalar")))?;
            replacements.insert(field.clone(), value);
        }
    }

    let mut lookups = Vec::new();
    if let Some(items) = v.get("lookups").and_then(Value::as_array) {
        for item in items {
            let operand = text(item, "operand");
            let query = text(item, "query");
            if operand.is_empty() {
                return Err(PlanError::Invalid("lookup without an operand name".into()));
            }
            lookups.push(LookupRequest { operand, query });
        }
    }
    let formula = Some(text(v, "formula")).filter(|f| !f.is_empty());

    for f in target_fields.iter().chain(replacements.keys()) {
        if schema.field(f).is_none() {
            return Err(PlanError::Invalid(format!("{f} is not a schema field")));
        }
    }

    match strategy {
        Strategy::DirectReplacement => {
            if replacements.is_empty() {
                return Err(PlanError::Invalid("direct replacement without replacements".into()));
            }
            if !lookups.is_empty() {
                return Err(PlanError::Invalid("direct replacement must not request lookups".into()));
            }
            for f in replacements.keys() {
                if !target_fields.contains(f) {
                    target_fields.push(f.clone());
                }
            }
        }
        Strategy::Calculation => {
            if target_fields.len() != 1 {
                return Err(PlanError::Invalid(format!(
                    "calculation needs exactly one target field, got {}",
                    target_fields.len()
                )));
            }
            let target = &target_fields[0];
            if !schema.field(target).is_some_and(|f| f.field_type.is_numeric()) {
                return Err(PlanError::Invalid(format!("calculation target {target} is not numeric")));
            }
            let Some(src) = &formula else {
                return Err(PlanError::Invalid("calculation without a formula".into()));
            };
            let parsed = Formula::parse(src).map_err(|e| PlanError::Invalid(format!("formula: {e}")))?;
            let defined: BTreeSet<&str> = lookups.iter().map(|l| l.operand.as_str()).collect();
            if defined.len() != lookups.len() {
                return Err(PlanError::Invalid("duplicate lookup operand".into()));
            }
            for op in parsed.operands() {
                if !defined.contains(op.as_str()) {
                    return Err(PlanError::Invalid(format!("operand {op} is not defined by a lookup")));
                }
            }
        }
    }

    Ok(RemediationPlan {
        strategy,
        target_fields,
        replacements,
        formula,
        lookups,
        justification,
    })
}

pub struct PlanInput<'a> {
    pub dp: &'a DataPoint,
    pub schema: &'a SchemaSpec,
    pub verdict: &'a Verdict,
    pub page: &'a PageContent,
    pub context_fragment: &'a str,
    pub page_budget: usize,
}

pub fn plan_prompt(input: &PlanInput<'_>) -> String {
    let (page, _) = fit_to_budget(&input.page.markdown, input.page_budget);
    let row = serde_json::to_string_pretty(&input.dp.values_json(input.schema)).unwrap_or_default();
    prompts::render(
        prompts::REMEDIATION_ANALYST,
        &[
            ("description", &input.schema.dataset_description),
            ("fields", &schema_listing(input.schema)),
            ("context", input.context_fragment),
            ("row", &row),
            ("reasons", &input.verdict.reasons_text()),
            ("notes", &input.verdict.notes),
            ("shape", &plan_shape().describe()),
            ("page", &page),
        ],
    )
}

#[derive(Debug, Error)]
pub enum PlanFailure {
    #[error(transparent)]
    Rejected(#[from] PlanError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One REMEDIATION_ANALYST call keyed by row id.
pub async fn plan_remediation(input: &PlanInput<'_>, gateway: &Gateway) -> Result<RemediationPlan, PlanFailure> {
    let prompt = plan_prompt(input);
    let (v, _) = gateway
        .complete_structured(AgentKind::RemediationAnalyst, &input.dp.row_id, &prompt, &plan_shape())
        .await?;
    Ok(parse_plan(&v, input.schema)?)
}

// ---- lookup ----

fn lookup_shape() -> ResponseShape {
    ResponseShape::new()
        .field("found", FieldKind::Bool)
        .optional("value", FieldKind::Any)
        .optional("excerpt", FieldKind::Text)
}

pub fn lookup_prompt(operand: &str, query: &str, page: &PageContent, page_budget: usize) -> String {
    let (page, _) = fit_to_budget(&page.markdown, page_budget);
    prompts::render(
        prompts::FACT_LOOKUP_EXTRACT,
        &[
            ("operand", operand),
            ("query", query),
            ("shape", &lookup_shape().describe()),
            ("page", &page),
        ],
    )
}

fn parse_lookup(v: &Value) -> Option<(Decimal, String)> {
    if !v["found"].as_bool().unwrap_or(false) {
        return None;
    }
    let value = match v.get("value")? {
        Value::Number(n) => Decimal::from_str(&n.to_string())
            .or_else(|_| Decimal::from_scientific(&n.to_string()))
            .ok()?,
        Value::String(s) => parse_decimal(s)?,
        _ => return None,
    };
    let excerpt = text(v, "excerpt");
    if excerpt.is_empty() {
        return None;
    }
    Some((value, excerpt))
}

pub struct LookupServices<'a> {
    pub gateway: &'a Gateway,
    pub fetcher: &'a Fetcher,
    pub search: &'a dyn SearchProvider,
    pub page_budget: usize,
}

#[derive(Debug, Error)]
pub enum LookupFailure {
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Searches, then reads up to [`LOOKUP_BREADTH`] result pages until one yields the figure.
/// Extraction calls are keyed `{row_id}:{operand}:{rank}` (rank from 1).
pub async fn lookup_fact(
    row_id: &str,
    request: &LookupRequest,
    services: &LookupServices<'_>,
) -> Result<FactLookupResult, LookupFailure> {
    if request.query.trim().is_empty() {
        return Err(LookupError::EmptyQuery(request.operand.clone()).into());
    }
    let urls = services
        .search
        .search(&request.query)
        .await
        .map_err(|e| LookupError::Search(e.to_string()))?;
    let mut pages = 0;
    for (i, url) in urls.iter().take(LOOKUP_BREADTH).enumerate() {
        let page = services.fetcher.fetch_page(url).await;
        pages += 1;
        if page.is_unusable() {
            continue;
        }
        let prompt = lookup_prompt(&request.operand, &request.query, &page, services.page_budget);
        let key = format!("{row_id}:{}:{}", request.operand, i + 1);
        match services
            .gateway
            .complete_structured(AgentKind::FactLookupExtract, &key, &prompt, &lookup_shape())
            .await
        {
            Ok((v, _)) => {
                if let Some((value, excerpt)) = parse_lookup(&v) {
                    return Ok(FactLookupResult {
                        operand: request.operand.clone(),
                        value,
                        source_url: page.final_url.clone(),
                        excerpt,
                    });
                }
            }
            Err(e) if e.is_parse_exhausted() => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(LookupError::NotFound {
        operand: request.operand.clone(),
        pages,
    }
    .into())
}

// ---- apply ----

fn render_number(value: Decimal, ty: FieldType) -> String {
    match ty {
        FieldType::Integer => value
            .round_dp_with_strategy(0, RoundingStrategy::MidpointAwayFromZero)
            .normalize()
            .to_string(),
        _ => value.normalize().to_string(),
    }
}

/// Executes the plan and re-coerces; the result carries origin REMEDIATED.
pub fn apply_plan(
    dp: &DataPoint,
    plan: &RemediationPlan,
    lookups: &[FactLookupResult],
    schema: &SchemaSpec,
) -> Result<DataPoint, ApplyError> {
    let mut out = dp.clone();
    match plan.strategy {
        Strategy::DirectReplacement => {
            for (field, value) in &plan.replacements {
                out.values.insert(field.clone(), FieldValue::Text(value.clone()));
            }
        }
        Strategy::Calculation => {
            let src = plan.formula.as_deref().unwrap_or_default();
            let formula = Formula::parse(src).map_err(|e| ApplyError::Formula(e.to_string()))?;
            let env: BTreeMap<String, Decimal> = lookups.iter().map(|l| (l.operand.clone(), l.value)).collect();
            let value = formula.eval(&env)?;
            let target = &plan.target_fields[0];
            let ty = schema
                .field(target)
                .map(|f| f.field_type)
                .ok_or_else(|| ApplyError::Invalid(format!("{target} is not a schema field")))?;
            out.values.insert(target.clone(), FieldValue::Text(render_number(value, ty)));
        }
    }
    let mut coerced = coerce_record(&out, schema).map_err(|e| ApplyError::Invalid(e.to_string()))?;
    coerced.origin = Origin::Remediated;
    Ok(coerced)
}

// ---- audit ----

fn audit_shape() -> ResponseShape {
    ResponseShape::new()
        .field("approved", FieldKind::Bool)
        .optional("notes", FieldKind::Text)
}

pub struct AuditInput<'a> {
    pub original: &'a DataPoint,
    pub corrected: &'a DataPoint,
    pub plan: &'a RemediationPlan,
    pub lookups: &'a [FactLookupResult],
    pub schema: &'a SchemaSpec,
    pub page: &'a PageContent,
    pub page_budget: usize,
}

pub fn audit_prompt(input: &AuditInput<'_>) -> String {
    let (page, _) = fit_to_budget(&input.page.markdown, input.page_budget);
    let mut lookups = String::new();
    for l in input.lookups {
        let _ = writeln!(
            lookups,
            "- {} = {} (from {}): \"{}\"",
            l.operand, l.value, l.source_url, l.excerpt
        );
    }
    if lookups.is_empty() {
        lookups.push_str("(none)");
    }
    prompts::render(
        prompts::REMEDIATION_AUDIT,
        &[
            (
                "original",
                &serde_json::to_string_pretty(&input.original.values_json(input.schema)).unwrap_or_default(),
            ),
            (
                "corrected",
                &serde_json::to_string_pretty(&input.corrected.values_json(input.schema)).unwrap_or_default(),
            ),
            ("plan", &serde_json::to_string_pretty(input.plan).unwrap_or_default()),
            ("lookups", &lookups),
            ("shape", &audit_shape().describe()),
            ("page", &page),
        ],
    )
}

/// One REMEDIATION_AUDIT call keyed by row id; unparseable replies fail closed.
pub async fn audit_remediation(input: &AuditInput<'_>, gateway: &Gateway) -> Result<AuditVerdict, GatewayError> {
    let prompt = audit_prompt(input);
    match gateway
        .complete_structured(AgentKind::RemediationAudit, &input.original.row_id, &prompt, &audit_shape())
        .await
    {
        Ok((v, _)) => {
            let approved = v["approved"].as_bool().unwrap_or(false);
            let mut notes = text(&v, "notes");
            if notes.is_empty() {
                notes = if approved { "approved" } else { "rejected without notes" }.into();
            }
            Ok(AuditVerdict { approved, notes })
        }
        Err(e) if e.is_parse_exhausted() => Ok(AuditVerdict {
            approved: false,
            notes: "unparseable audit response".into(),
        }),
        Err(e) => Err(e),
    }
}

// ---- full loop ----

/// Where a remediation attempt ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RemediationOutcome {
    Remediated {
        record: DataPoint,
        plan: RemediationPlan,
        lookups: Vec<FactLookupResult>,
        audit: AuditVerdict,
    },
    Failed {
        stage: AgentKind,
        reason: String,
        plan: Option<RemediationPlan>,
    },
}

/// Stage-level trace of one attempt, for the event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemediationStep {
    pub stage: AgentKind,
    pub note: String,
}

/// Plan → lookups → apply → audit, at most once. Only provider failures escape as errors.
pub async fn remediate(
    input: &PlanInput<'_>,
    services: &LookupServices<'_>,
    steps: &mut Vec<RemediationStep>,
) -> Result<RemediationOutcome, GatewayError> {
    let plan = match plan_remediation(input, services.gateway).await {
        Ok(plan) => plan,
        Err(PlanFailure::Gateway(e)) if !e.is_parse_exhausted() => return Err(e),
        Err(e) => {
            return Ok(RemediationOutcome::Failed {
                stage: AgentKind::RemediationAnalyst,
                reason: e.to_string(),
                plan: None,
            })
        }
    };
    steps.push(RemediationStep {
        stage: AgentKind::RemediationAnalyst,
        note: format!("{:?} plan: {}", plan.strategy, plan.justification),
    });

    let mut lookups = Vec::new();
    if plan.strategy == Strategy::Calculation {
        let needed = plan
            .formula
            .as_deref()
            .and_then(|f| Formula::parse(f).ok())
            .map(|f| f.operands())
            .unwrap_or_default();
        for request in plan.lookups.iter().filter(|l| needed.contains(&l.operand)) {
            match lookup_fact(&input.dp.row_id, request, services).await {
                Ok(found) => {
                    steps.push(RemediationStep {
                        stage: AgentKind::FactLookupExtract,
                        note: format!("{} = {} from {}", found.operand, found.value, found.source_url),
                    });
                    lookups.push(found);
                }
                Err(LookupFailure::Gateway(e)) => return Err(e),
                Err(LookupFailure::Lookup(e)) => {
                    return Ok(RemediationOutcome::Failed {
                        stage: AgentKind::FactLookupExtract,
                        reason: e.to_string(),
                        plan: Some(plan),
                    })
                }
            }
        }
    }

    let corrected = match apply_plan(input.dp, &plan, &lookups, input.schema) {
        Ok(c) => c,
        Err(e) => {
            return Ok(RemediationOutcome::Failed {
                stage: AgentKind::RemediationAnalyst,
                reason: format!("apply failed: {e}"),
                plan: Some(plan),
            })
        }
    };

    let audit_input = AuditInput {
        original: input.dp,
        corrected: &corrected,
        plan: &plan,
        lookups: &lookups,
        schema: input.schema,
        page: input.page,
        page_budget: input.page_budget,
    };
    let audit = audit_remediation(&audit_input, services.gateway).await?;
    if !audit.approved {
        return Ok(RemediationOutcome::Failed {
            stage: AgentKind::RemediationAudit,
            reason: audit.notes,
            plan: Some(plan),
        });
    }
    Ok(RemediationOutcome::Remediated {
        record: corrected,
        plan,
        lookups,
        audit,
    })
}

#[cfg(test)]
mod tests;
