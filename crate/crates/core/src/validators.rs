//! Relevancy screening, source scrutiny, fact checking and the arbiter.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cache::SingleFlight;
use crate::gateway::{fit_to_budget, prompts, AgentKind, FieldKind, Gateway, GatewayError, ResponseShape};
use crate::retrieval::PageContent;
use crate::schema::{normalize_date, DataPoint, DateValue, SchemaSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevancyVerdict {
    pub is_relevant: bool,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reliability {
    VeryLow,
    Low,
    Medium,
    High,
    VeryHigh,
}

impl Reliability {
    pub const ALL: [Reliability; 5] = [
        Reliability::VeryLow,
        Reliability::Low,
        Reliability::Medium,
        Reliability::High,
        Reliability::VeryHigh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reliability::VeryLow => "VERY_LOW",
            Reliability::Low => "LOW",
            Reliability::Medium => "MEDIUM",
            Reliability::High => "HIGH",
            Reliability::VeryHigh => "VERY_HIGH",
        }
    }

    pub fn is_unreliable(self) -> bool {
        matches!(self, Reliability::Low | Reliability::VeryLow)
    }
}

impl FromStr for Reliability {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace([' ', '-'], "_");
        Self::ALL.into_iter().find(|r| r.as_str() == norm).ok_or(())
    }
}

impl fmt::Display for Reliability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceAssessment {
    pub source_type: String,
    pub reliability: Reliability,
    pub notes: String,
}

impl SourceAssessment {
    /// Used when scrutiny is disabled or unparseable.
    pub fn neutral(notes: &str) -> Self {
        Self {
            source_type: "unassessed".into(),
            reliability: Reliability::Medium,
            notes: notes.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactCheckReport {
    pub has_meaningful_content: bool,
    pub supports_claims: bool,
    pub extracted_date: Option<DateValue>,
    pub notes: String,
}

impl FactCheckReport {
    pub fn unparseable() -> Self {
        Self {
            has_meaningful_content: false,
            supports_claims: false,
            extracted_date: None,
            notes: "unparseable".into(),
        }
    }

    /// Stand-in when the fact checker is disabled.
    pub fn bypassed() -> Self {
        Self {
            has_meaningful_content: true,
            supports_claims: true,
            extracted_date: None,
            notes: "fact check disabled".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    NotRelevant,
    NoMeaningfulContent,
    ClaimsUnsupported,
    UnreliableSource,
    FetchFailed,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::NotRelevant => "NOT_RELEVANT",
            RejectReason::NoMeaningfulContent => "NO_MEANINGFUL_CONTENT",
            RejectReason::ClaimsUnsupported => "CLAIMS_UNSUPPORTED",
            RejectReason::UnreliableSource => "UNRELIABLE_SOURCE",
            RejectReason::FetchFailed => "FETCH_FAILED",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub reasons: Vec<RejectReason>,
    pub notes: String,
}

impl Verdict {
    pub fn reject(reason: RejectReason, notes: impl Into<String>) -> Self {
        Self {
            decision: Decision::Reject,
            reasons: vec![reason],
            notes: notes.into(),
        }
    }

    pub fn is_accept(&self) -> bool {
        self.decision == Decision::Accept
    }

    pub fn reasons_text(&self) -> String {
        self.reasons.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(", ")
    }
}

/// The rule engine. Depends on nothing but the two reports.
pub fn arbitrate(fc: &FactCheckReport, src: &SourceAssessment) -> Verdict {
    let mut reasons = Vec::new();
    if !fc.has_meaningful_content {
        reasons.push(RejectReason::NoMeaningfulContent);
    }
    if !fc.supports_claims {
        reasons.push(RejectReason::ClaimsUnsupported);
    }
    if src.reliability.is_unreliable() {
        reasons.push(RejectReason::UnreliableSource);
    }
    let decision = if reasons.is_empty() {
        Decision::Accept
    } else {
        Decision::Reject
    };
    Verdict {
        decision,
        reasons,
        notes: format!(
            "fact check: {}; source: {} ({})",
            fc.notes, src.source_type, src.reliability
        ),
    }
}

fn text(v: &Value, key: &str) -> String {
    v.get(key)
        .and_then(Value::as_str)
        .map(str::trim)
        .unwrap_or_default()
        .to_string()
}

// ---- relevancy ----

fn relevancy_shape() -> ResponseShape {
    ResponseShape::new()
        .field("is_relevant", FieldKind::Bool)
        .optional("reason", FieldKind::Text)
}

/// Prompt sees only the schema-field values and the dataset-level fragment.
pub fn relevancy_prompt(dp: &DataPoint, schema: &SchemaSpec, context_fragment: &str) -> String {
    prompts::render(
        prompts::RELEVANCY,
        &[
            ("context", context_fragment),
            ("row", &dp.values_json(schema).to_string()),
            ("shape", &relevancy_shape().describe()),
        ],
    )
}

pub async fn assess_relevancy(
    dp: &DataPoint,
    schema: &SchemaSpec,
    context_fragment: &str,
    gateway: &Gateway,
) -> Result<RelevancyVerdict, GatewayError> {
    let prompt = relevancy_prompt(dp, schema, context_fragment);
    match gateway
        .complete_structured(AgentKind::Relevancy, &dp.row_id, &prompt, &relevancy_shape())
        .await
    {
        Ok((v, _)) => {
            let is_relevant = v["is_relevant"].as_bool().unwrap_or(false);
            let mut reason = text(&v, "reason");
            if !is_relevant && reason.is_empty() {
                reason = "judged not relevant to the dataset description".into();
            }
            Ok(RelevancyVerdict { is_relevant, reason })
        }
        Err(e) if e.is_parse_exhausted() => Ok(RelevancyVerdict {
            is_relevant: false,
            reason: "unparseable relevancy response".into(),
        }),
        Err(e) => Err(e),
    }
}

// ---- source scrutiny ----

const TWO_LEVEL_SUFFIXES: &[&str] = &[
    "co.uk", "org.uk", "gov.uk", "ac.uk", "ltd.uk", "com.au", "net.au", "org.au", "gov.au", "edu.au",
    "co.nz", "govt.nz", "co.jp", "or.jp", "go.jp", "com.br", "gov.br", "co.za", "gov.za", "com.cn",
    "gov.cn", "co.in", "gov.in", "com.mx", "gob.mx", "com.ar", "gob.ar", "co.kr", "go.kr", "com.tr",
    "gov.tr", "com.sg", "gov.sg", "com.hk", "gov.hk", "org.ht", "gouv.ht", "gov.ht", "com.ht", "gouv.fr",
    "gov.cm", "co.cm",
];

/// Registrable domain of a URL's host (eTLD+1 over a small built-in suffix list).
pub fn registrable_domain(url: &str) -> Option<String> {
    let parsed = url::Url::parse(url).ok()?;
    let host = parsed.host()?;
    let name = match host {
        url::Host::Domain(d) => d.trim_end_matches('.').to_ascii_lowercase(),
        url::Host::Ipv4(ip) => return Some(ip.to_string()),
        url::Host::Ipv6(ip) => return Some(ip.to_string()),
    };
    let labels: Vec<&str> = name.split('.').filter(|l| !l.is_empty()).collect();
    if labels.len() <= 2 {
        return Some(labels.join("."));
    }
    let last_two = labels[labels.len() - 2..].join(".");
    let keep = if TWO_LEVEL_SUFFIXES.contains(&last_two.as_str()) { 3 } else { 2 };
    Some(labels[labels.len() - keep..].join("."))
}

fn scrutiny_shape() -> ResponseShape {
    ResponseShape::new()
        .field("source_type", FieldKind::Text)
        .field("reliability", FieldKind::Text)
        .optional("notes", FieldKind::Text)
}

pub fn scrutiny_prompt(url: &str, domain: &str) -> String {
    prompts::render(
        prompts::SOURCE_SCRUTINY,
        &[("url", url), ("domain", domain), ("shape", &scrutiny_shape().describe())],
    )
}

/// Source reputation judged from the URL alone, cached per registrable domain.
#[derive(Default)]
pub struct SourceScrutinizer {
    cache: SingleFlight<String, SourceAssessment>,
}

impl SourceScrutinizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub async fn scrutinize(&self, url: &str, gateway: &Gateway) -> Result<SourceAssessment, GatewayError> {
        let domain = registrable_domain(url).unwrap_or_else(|| url.to_string());
        self.cache
            .get_or_try_init(domain.clone(), || scrutinize_source(url, &domain, gateway))
            .await
    }
}

/// One SOURCE_SCRUTINY call keyed by `domain`; unparseable replies fail open to MEDIUM.
pub async fn scrutinize_source(url: &str, domain: &str, gateway: &Gateway) -> Result<SourceAssessment, GatewayError> {
    let prompt = scrutiny_prompt(url, domain);
    match gateway
        .complete_structured(AgentKind::SourceScrutiny, domain, &prompt, &scrutiny_shape())
        .await
    {
        Ok((v, _)) => {
            let mut source_type = text(&v, "source_type");
            if source_type.is_empty() {
                source_type = "unknown".into();
            }
            let notes = text(&v, "notes");
            Ok(match text(&v, "reliability").parse::<Reliability>() {
                Ok(reliability) => SourceAssessment {
                    source_type,
                    reliability,
                    notes,
                },
                Err(()) => SourceAssessment {
                    source_type,
                    reliability: Reliability::Medium,
                    notes: "unrecognized reliability level".into(),
                },
            })
        }
        Err(e) if e.is_parse_exhausted() => Ok(SourceAssessment::neutral("scrutiny unparseable")),
        Err(e) => Err(e),
    }
}

// ---- fact check ----

fn fact_check_shape() -> ResponseShape {
    ResponseShape::new()
        .field("has_meaningful_content", FieldKind::Bool)
        .field("supports_claims", FieldKind::Bool)
        .optional("extracted_date", FieldKind::Text)
        .field("notes", FieldKind::Text)
}

pub struct FactCheckInput<'a> {
    pub dp: &'a DataPoint,
    pub schema: &'a SchemaSpec,
    pub page: &'a PageContent,
    pub hint: &'a str,
    pub context_fragment: &'a str,
    /// Stripped prompt without the semantic audit and context fragment.
    pub minimal: bool,
    pub page_budget: usize,
}

/// Assembled prompt and whether the page had to be truncated for it.
pub fn fact_check_prompt(input: &FactCheckInput<'_>) -> (String, bool) {
    let (page, truncated) = fit_to_budget(&input.page.markdown, input.page_budget);
    let row = serde_json::to_string_pretty(&input.dp.values_json(input.schema)).unwrap_or_default();
    let shape = fact_check_shape().describe();
    let prompt = if input.minimal {
        prompts::render(
            prompts::FACT_CHECK_MIN,
            &[("row", &row), ("hint", input.hint), ("page", &page), ("shape", &shape)],
        )
    } else {
        let context = if input.context_fragment.trim().is_empty() {
            "(no dataset-specific rules)"
        } else {
            input.context_fragment
        };
        prompts::render(
            prompts::FACT_CHECK,
            &[
                ("row", &row),
                ("hint", input.hint),
                ("context", context),
                ("page", &page),
                ("shape", &shape),
            ],
        )
    };
    (prompt, truncated)
}

pub fn parse_fact_check(v: &Value) -> FactCheckReport {
    let extracted_date = v
        .get("extracted_date")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .and_then(|s| normalize_date(s).ok());
    let mut notes = text(v, "notes");
    if notes.is_empty() {
        notes = "no notes provided".into();
    }
    FactCheckReport {
        has_meaningful_content: v["has_meaningful_content"].as_bool().unwrap_or(false),
        supports_claims: v["supports_claims"].as_bool().unwrap_or(false),
        extracted_date,
        notes,
    }
}

/// One FACT_CHECK call keyed by row id; unparseable replies fail closed.
pub async fn fact_check(input: &FactCheckInput<'_>, gateway: &Gateway) -> Result<(FactCheckReport, bool), GatewayError> {
    let (prompt, truncated) = fact_check_prompt(input);
    match gateway
        .complete_structured(AgentKind::FactCheck, &input.dp.row_id, &prompt, &fact_check_shape())
        .await
    {
        Ok((v, _)) => Ok((parse_fact_check(&v), truncated)),
        Err(e) if e.is_parse_exhausted() => Ok((FactCheckReport::unparseable(), truncated)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, ScriptedProvider};
    use crate::retrieval::{analysis_hint, LayoutClass};
    use crate::schema::{FieldSpec, FieldType};
    use serde_json::json;
    use std::sync::Arc;

    fn gateway(fixture: Value) -> Gateway {
        Gateway::new(Arc::new(ScriptedProvider::from_json(&fixture).unwrap()), GatewayConfig::default())
    }

    fn schema() -> SchemaSpec {
        SchemaSpec::new(
            vec![
                FieldSpec::new("event_type", FieldType::Text),
                FieldSpec::new("country", FieldType::Text),
                FieldSpec::new("date", FieldType::Date),
            ],
            "natural disaster events in Haiti and Cameroon",
        )
        .unwrap()
    }

    fn quake() -> DataPoint {
        DataPoint::new("r1", "https://news.test/quake")
            .with("event_type", "earthquake")
            .with("country", "Haiti")
            .with("date", "2021-08-14")
    }

    fn page(md: &str) -> PageContent {
        PageContent {
            url: "https://news.test/quake".into(),
            final_url: "https://news.test/quake".into(),
            http_status: 200,
            markdown: md.into(),
            fetched_at: chrono::Utc::now(),
            truncated: false,
        }
    }

    fn fc(content: bool, claims: bool) -> FactCheckReport {
        FactCheckReport {
            has_meaningful_content: content,
            supports_claims: claims,
            extracted_date: None,
            notes: "n".into(),
        }
    }

    fn src(r: Reliability) -> SourceAssessment {
        SourceAssessment {
            source_type: "t".into(),
            reliability: r,
            notes: String::new(),
        }
    }

    #[test]
    fn arbiter_named_cases() {
        assert!(arbitrate(&fc(true, true), &src(Reliability::High)).is_accept());
        let v = arbitrate(&fc(false, true), &src(Reliability::High));
        assert_eq!(v.reasons, vec![RejectReason::NoMeaningfulContent]);
        let v = arbitrate(&fc(true, true), &src(Reliability::VeryLow));
        assert_eq!(v.reasons, vec![RejectReason::UnreliableSource]);
        let v = arbitrate(&fc(false, false), &src(Reliability::Low));
        assert_eq!(v.reasons.len(), 3);
    }

    #[test]
    fn arbiter_exhaustive_table() {
        for content in [false, true] {
            for claims in [false, true] {
                for r in Reliability::ALL {
                    let v = arbitrate(&fc(content, claims), &src(r));
                    let expect_accept = content && claims && !matches!(r, Reliability::Low | Reliability::VeryLow);
                    assert_eq!(v.is_accept(), expect_accept);
                    assert_eq!(v.decision == Decision::Reject, !v.reasons.is_empty());
                }
            }
        }
    }

    #[tokio::test]
    async fn relevancy_scripted_and_fail_closed() {
        let gw = gateway(json!({
            "RELEVANCY:r1": {"is_relevant": true, "reason": "disaster in Haiti"},
            "RELEVANCY:r2": {"is_relevant": false},
            "RELEVANCY:r3": "maybe?"
        }));
        let s = schema();
        assert!(assess_relevancy(&quake(), &s, "", &gw).await.unwrap().is_relevant);
        let mut wedding = DataPoint::new("r2", "https://gossip.test/x").with("event_type", "celebrity wedding");
        let v = assess_relevancy(&wedding, &s, "", &gw).await.unwrap();
        assert!(!v.is_relevant && !v.reason.is_empty());
        wedding.row_id = "r3".into();
        let v = assess_relevancy(&wedding, &s, "", &gw).await.unwrap();
        assert_eq!(v.reason, "unparseable relevancy response");
        assert!(!v.is_relevant);
    }

    #[test]
    fn relevancy_prompt_has_no_page_or_fallacies() {
        let p = relevancy_prompt(&quake(), &schema(), "Dataset purpose: disasters\nSchema fields: a, b\n");
        assert!(p.contains("\"country\":\"Haiti\""));
        assert!(!p.contains("<<<PAGE"));
        assert!(!p.contains("Fallacies"));
    }

    #[tokio::test]
    async fn scrutiny_cached_per_domain() {
        let gw = gateway(json!({
            "SOURCE_SCRUTINY:example-gov.test": {"source_type": "government portal", "reliability": "HIGH"},
            "SOURCE_SCRUTINY:blog.test": {"source_type": "personal blog", "reliability": "Low"},
            "SOURCE_SCRUTINY:junk.test": "???"
        }));
        let s = SourceScrutinizer::new();
        let a = s.scrutinize("https://www.example-gov.test/a", &gw).await.unwrap();
        let b = s.scrutinize("https://data.example-gov.test/b", &gw).await.unwrap();
        assert_eq!(a, b);
        assert_eq!((a.source_type.as_str(), a.reliability), ("government portal", Reliability::High));
        assert_eq!(gw.ledger().count(AgentKind::SourceScrutiny), 1);
        let blog = s.scrutinize("https://blog.test/post", &gw).await.unwrap();
        assert!(!arbitrate(&fc(true, true), &blog).is_accept());
        let junk = s.scrutinize("https://junk.test/", &gw).await.unwrap();
        assert_eq!(junk.reliability, Reliability::Medium);
        assert_eq!(junk.notes, "scrutiny unparseable");
    }

    #[test]
    fn registrable_domains() {
        assert_eq!(registrable_domain("https://www.bbc.co.uk/news").as_deref(), Some("bbc.co.uk"));
        assert_eq!(registrable_domain("https://a.b.reuters.com/x").as_deref(), Some("reuters.com"));
        assert_eq!(registrable_domain("http://127.0.0.1:8080/x").as_deref(), Some("127.0.0.1"));
        assert_eq!(registrable_domain("http://localhost/x").as_deref(), Some("localhost"));
        assert_eq!(registrable_domain("not a url"), None);
    }

    #[tokio::test]
    async fn fact_check_happy_path_and_fail_closed() {
        let gw = gateway(json!({
            "FACT_CHECK:r1": {
                "has_meaningful_content": true, "supports_claims": true,
                "extracted_date": "August 14, 2021", "notes": "the page states the earthquake"
            },
            "FACT_CHECK:r2": "not json"
        }));
        let s = schema();
        let dp = quake();
        let p = page("A magnitude 7.2 earthquake struck Haiti on August 14, 2021");
        let input = FactCheckInput {
            dp: &dp,
            schema: &s,
            page: &p,
            hint: analysis_hint(LayoutClass::Article),
            context_fragment: "",
            minimal: false,
            page_budget: 40_000,
        };
        let (r, truncated) = fact_check(&input, &gw).await.unwrap();
        assert!(r.has_meaningful_content && r.supports_claims && !truncated);
        assert_eq!(r.extracted_date.unwrap().canonical(), "2021-08-14");

        let mut dp2 = dp.clone();
        dp2.row_id = "r2".into();
        let input = FactCheckInput { dp: &dp2, ..input };
        let (r, _) = fact_check(&input, &gw).await.unwrap();
        assert_eq!(r, FactCheckReport::unparseable());
        assert!(!arbitrate(&r, &src(Reliability::VeryHigh)).is_accept());
    }

    #[test]
    fn fact_check_prompt_contents() {
        let s = schema();
        let dp = quake();
        let p = page("- Flood, 2021\n- Earthquake, 2021-08-14");
        let hint = analysis_hint(LayoutClass::DirectoryListing);
        let input = FactCheckInput {
            dp: &dp,
            schema: &s,
            page: &p,
            hint,
            context_fragment: "RULES-FRAGMENT",
            minimal: false,
            page_budget: 40_000,
        };
        let (full, _) = fact_check_prompt(&input);
        assert!(full.contains(hint));
        for principle in ["Full entities", "Granularity matching", "Qualifying terms", "Meaning over keywords"] {
            assert!(full.contains(principle), "{principle}");
        }
        let order = ["\"event_type\"", hint, "RULES-FRAGMENT", "Critical Semantic Audit", "- Flood, 2021"];
        let positions: Vec<usize> = order.iter().map(|s| full.find(s).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{positions:?}");

        let (min, _) = fact_check_prompt(&FactCheckInput { minimal: true, ..input });
        assert!(!min.contains("Critical Semantic Audit"));
        assert!(!min.contains("RULES-FRAGMENT"));
    }

    #[test]
    fn page_budget_truncation_is_reported() {
        let s = schema();
        let dp = quake();
        let p = page(&"x".repeat(500));
        let input = FactCheckInput {
            dp: &dp,
            schema: &s,
            page: &p,
            hint: "",
            context_fragment: "",
            minimal: false,
            page_budget: 100,
        };
        assert!(fact_check_prompt(&input).1);
    }
}
