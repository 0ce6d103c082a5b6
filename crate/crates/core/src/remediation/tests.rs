use std::sync::Arc;

use chrono::Utc;
use serde_json::json;

use super::*;
use crate::gateway::{GatewayConfig, ScriptedProvider};
use crate::retrieval::{write_snapshot, FetchConfig, FetchMode};
use crate::schema::{FieldSpec, FieldType};
use crate::validators::RejectReason;

fn schema() -> SchemaSpec {
    SchemaSpec::new(
        vec![
            FieldSpec::new("event_type", FieldType::Text),
            FieldSpec::new("location", FieldType::Text),
            FieldSpec::new("affected", FieldType::Integer),
            FieldSpec::new("date", FieldType::Date),
        ],
        "natural disasters in Haiti",
    )
    .unwrap()
}

fn gateway(fixture: Value) -> Gateway {
    Gateway::new(Arc::new(ScriptedProvider::from_json(&fixture).unwrap()), GatewayConfig::default())
}

fn page(url: &str, md: &str) -> PageContent {
    PageContent {
        url: url.into(),
        final_url: url.into(),
        http_status: 200,
        markdown: md.into(),
        fetched_at: Utc::now(),
        truncated: false,
    }
}

fn row() -> DataPoint {
    DataPoint::new("r7", "https://news.test/flood")
        .with("event_type", "flood")
        .with("location", "Pétion-Ville")
        .with("affected", "1,200")
        .with("date", "2023-06-03")
}

fn replay_fetcher(pages: &[PageContent]) -> (tempfile::TempDir, Fetcher) {
    let dir = tempfile::tempdir().unwrap();
    for p in pages {
        write_snapshot(dir.path(), p, None).unwrap();
    }
    let fetcher = Fetcher::new(FetchConfig {
        mode: FetchMode::Replay(dir.path().to_path_buf()),
        politeness_delay: std::time::Duration::ZERO,
        ..FetchConfig::default()
    });
    (dir, fetcher)
}

#[test]
fn plan_invariants() {
    let s = schema();
    let direct = parse_plan(
        &json!({"strategy": "DIRECT_REPLACEMENT", "replacements": {"location": "Port-au-Prince"}, "justification": "page names Port-au-Prince"}),
        &s,
    )
    .unwrap();
    assert_eq!(direct.strategy, Strategy::DirectReplacement);
    assert_eq!(direct.target_fields, vec!["location"]);

    let calc = parse_plan(
        &json!({"strategy": "CALCULATION", "target_fields": ["affected"], "formula": "0.12 * population",
                "lookups": [{"operand": "population", "query": "population of Ouest"}]}),
        &s,
    )
    .unwrap();
    assert_eq!(calc.lookups[0].operand, "population");

    let cases = [
        json!({"strategy": "CALCULATION", "target_fields": ["affected", "location"], "formula": "1",
               "lookups": []}),
        json!({"strategy": "CALCULATION", "target_fields": ["location"], "formula": "1"}),
        json!({"strategy": "CALCULATION", "target_fields": ["affected"], "formula": "0.1 * pop"}),
        json!({"strategy": "CALCULATION", "target_fields": ["affected"]}),
        json!({"strategy": "DIRECT_REPLACEMENT", "replacements": {}}),
        json!({"strategy": "DIRECT_REPLACEMENT", "replacements": {"location": "X"},
               "lookups": [{"operand": "a", "query": "q"}]}),
        json!({"strategy": "DIRECT_REPLACEMENT", "replacements": {"city": "X"}}),
    ];
    for c in cases {
        assert!(matches!(parse_plan(&c, &s), Err(PlanError::Invalid(_))), "{c}");
    }
    assert!(matches!(
        parse_plan(&json!({"strategy": "UNFIXABLE", "justification": "nothing on page"}), &s),
        Err(PlanError::Unfixable(_))
    ));
    assert!(matches!(
        parse_plan(&json!({"strategy": "GUESS"}), &s),
        Err(PlanError::UnknownStrategy(_))
    ));
}

#[test]
fn apply_direct_and_identity() {
    let s = schema();
    let plan = RemediationPlan {
        strategy: Strategy::DirectReplacement,
        target_fields: vec!["location".into()],
        replacements: [("location".to_string(), "Port-au-Prince".to_string())].into(),
        formula: None,
        lookups: vec![],
        justification: "j".into(),
    };
    let out = apply_plan(&row(), &plan, &[], &s).unwrap();
    assert_eq!(out.origin, Origin::Remediated);
    assert_eq!(out.get("location").unwrap().to_string(), "Port-au-Prince");
    assert_eq!(out.get("affected"), Some(&FieldValue::Integer(1200)));
    assert_eq!(out.get("event_type").unwrap().to_string(), "flood");

    let identity = RemediationPlan {
        replacements: [("location".to_string(), "Pétion-Ville".to_string())].into(),
        ..plan.clone()
    };
    let out = apply_plan(&row(), &identity, &[], &s).unwrap();
    assert_eq!(
        out,
        DataPoint {
            origin: Origin::Remediated,
            ..coerce_record(&row(), &s).unwrap()
        }
    );

    let emptying = RemediationPlan {
        replacements: [("event_type".to_string(), " ".to_string())].into(),
        ..plan
    };
    assert!(matches!(apply_plan(&row(), &emptying, &[], &s), Err(ApplyError::Invalid(_))));
}

#[test]
fn apply_calculation_rounds_half_away_from_zero() {
    let s = schema();
    let plan = |formula: &str| RemediationPlan {
        strategy: Strategy::Calculation,
        target_fields: vec!["affected".into()],
        replacements: BTreeMap::new(),
        formula: Some(formula.into()),
        lookups: vec![LookupRequest {
            operand: "population".into(),
            query: "q".into(),
        }],
        justification: "j".into(),
    };
    let pop = |v: &str| {
        vec![FactLookupResult {
            operand: "population".into(),
            value: Decimal::from_str(v).unwrap(),
            source_url: "u".into(),
            excerpt: "e".into(),
        }]
    };
    let out = apply_plan(&row(), &plan("0.12 * population"), &pop("4000000"), &s).unwrap();
    assert_eq!(out.get("affected"), Some(&FieldValue::Integer(480000)));
    let out = apply_plan(&row(), &plan("population / 2"), &pop("5"), &s).unwrap();
    assert_eq!(out.get("affected"), Some(&FieldValue::Integer(3)));
    let out = apply_plan(&row(), &plan("0 - population / 2"), &pop("5"), &s).unwrap();
    assert_eq!(out.get("affected"), Some(&FieldValue::Integer(-3)));
    assert!(matches!(
        apply_plan(&row(), &plan("1 / (population - population)"), &pop("5"), &s),
        Err(ApplyError::Eval(EvalError::DivisionByZero))
    ));
}

#[tokio::test]
async fn lookup_reads_at_most_three_pages() {
    let pages = [
        page("http://stats.test/a", "Nothing relevant here."),
        page("http://stats.test/b", "Still nothing."),
        page("http://stats.test/c", "Population: 4,000,000 (2021 estimate)."),
        page("http://stats.test/d", "Population: 9"),
    ];
    let (_dir, fetcher) = replay_fetcher(&pages);
    let search = FixtureSearch::new().with(
        "population of ouest",
        &["http://stats.test/a", "http://stats.test/b", "http://stats.test/c", "http://stats.test/d"],
    );
    let gw = gateway(json!({
        "FACT_LOOKUP_EXTRACT:r7:population:3": {"found": true, "value": "4,000,000", "excerpt": "Population: 4,000,000 (2021 estimate)."},
        "FACT_LOOKUP_EXTRACT:*": {"found": false}
    }));
    let services = LookupServices {
        gateway: &gw,
        fetcher: &fetcher,
        search: &search,
        page_budget: 40_000,
    };
    let req = LookupRequest {
        operand: "population".into(),
        query: "Population of Ouest".into(),
    };
    let found = lookup_fact("r7", &req, &services).await.unwrap();
    assert_eq!(found.value, Decimal::from(4_000_000));
    assert_eq!(found.source_url, "http://stats.test/c");
    assert!(pages[2].markdown.contains(&found.excerpt));
    assert_eq!(fetcher.fetch_count(), 3);

    let gw = gateway(json!({"FACT_LOOKUP_EXTRACT:*": {"found": false}}));
    let services = LookupServices { gateway: &gw, ..services };
    let err = lookup_fact("r8", &req, &services).await.unwrap_err();
    assert!(matches!(err, LookupFailure::Lookup(LookupError::NotFound { pages: 3, .. })));
    assert!(fetcher.fetch_count() <= 4);
}

#[tokio::test]
async fn full_loop_direct_replacement_and_audit_prompt() {
    let s = schema();
    let dp = row();
    let src = page("https://news.test/flood", "Flooding in Port-au-Prince on June 3, 2023 affected 1,200 people.");
    let (_dir, fetcher) = replay_fetcher(&[]);
    let search = FixtureSearch::new();
    let gw = gateway(json!({
        "REMEDIATION_ANALYST:r7": {"strategy": "DIRECT_REPLACEMENT", "target_fields": ["location"],
            "replacements": {"location": "Port-au-Prince"}, "justification": "the page names Port-au-Prince"},
        "REMEDIATION_AUDIT:r7": {"approved": true, "notes": "location matches the page"}
    }));
    let verdict = Verdict::reject(RejectReason::ClaimsUnsupported, "page names a different city");
    let input = PlanInput {
        dp: &dp,
        schema: &s,
        verdict: &verdict,
        page: &src,
        context_fragment: "",
        page_budget: 40_000,
    };
    let services = LookupServices {
        gateway: &gw,
        fetcher: &fetcher,
        search: &search,
        page_budget: 40_000,
    };
    let mut steps = Vec::new();
    let outcome = remediate(&input, &services, &mut steps).await.unwrap();
    let RemediationOutcome::Remediated { record, audit, .. } = outcome else {
        panic!("expected remediation, got {outcome:?}");
    };
    assert!(audit.approved);
    assert_eq!(record.get("location").unwrap().to_string(), "Port-au-Prince");
    assert_eq!(gw.ledger().count(AgentKind::RemediationAnalyst), 1);
    assert_eq!(gw.ledger().count(AgentKind::RemediationAudit), 1);
    assert_eq!(fetcher.fetch_count(), 0);

    let analyst_prompt = plan_prompt(&input);
    assert!(analyst_prompt.contains("CLAIMS_UNSUPPORTED"));
    assert!(analyst_prompt.contains("Port-au-Prince on June 3"));
}

#[tokio::test]
async fn audit_prompt_carries_lookup_excerpt_and_rejections_are_final() {
    let s = schema();
    let dp = row();
    let plan = RemediationPlan {
        strategy: Strategy::Calculation,
        target_fields: vec!["affected".into()],
        replacements: BTreeMap::new(),
        formula: Some("0.12 * population".into()),
        lookups: vec![LookupRequest {
            operand: "population".into(),
            query: "population of Ouest".into(),
        }],
        justification: "12% of residents".into(),
    };
    let lookups = vec![FactLookupResult {
        operand: "population".into(),
        value: Decimal::from(4_000_000),
        source_url: "http://stats.test/c".into(),
        excerpt: "Population: 4,000,000 (2021 estimate).".into(),
    }];
    let corrected = apply_plan(&dp, &plan, &lookups, &s).unwrap();
    let src = page("https://news.test/flood", "12% of the region's residents were affected.");
    let input = AuditInput {
        original: &dp,
        corrected: &corrected,
        plan: &plan,
        lookups: &lookups,
        schema: &s,
        page: &src,
        page_budget: 40_000,
    };
    assert!(audit_prompt(&input).contains("Population: 4,000,000 (2021 estimate)."));
    assert!(audit_prompt(&input).contains("0.12 * population"));

    let gw = gateway(json!({"REMEDIATION_AUDIT:r7": {"approved": false, "notes": "percentage applied to wrong base"}}));
    let v = audit_remediation(&input, &gw).await.unwrap();
    assert_eq!(v, AuditVerdict { approved: false, notes: "percentage applied to wrong base".into() });
    let gw = gateway(json!({"REMEDIATION_AUDIT:r7": "looks fine to me"}));
    assert!(!audit_remediation(&input, &gw).await.unwrap().approved);
}

#[tokio::test]
async fn unfixable_and_unparseable_plans_end_the_attempt() {
    let s = schema();
    let dp = row();
    let src = page("https://news.test/flood", "x");
    let (_dir, fetcher) = replay_fetcher(&[]);
    let search = FixtureSearch::new();
    let verdict = Verdict::reject(RejectReason::UnreliableSource, "blog");
    for reply in [json!({"strategy": "UNFIXABLE"}), json!("no idea")] {
        let gw = gateway(json!({ "REMEDIATION_ANALYST:*": reply }));
        let input = PlanInput {
            dp: &dp,
            schema: &s,
            verdict: &verdict,
            page: &src,
            context_fragment: "",
            page_budget: 40_000,
        };
        let services = LookupServices {
            gateway: &gw,
            fetcher: &fetcher,
            search: &search,
            page_budget: 40_000,
        };
        let out = remediate(&input, &services, &mut Vec::new()).await.unwrap();
        assert!(matches!(out, RemediationOutcome::Failed { stage: AgentKind::RemediationAnalyst, .. }));
        assert_eq!(gw.ledger().count(AgentKind::RemediationAudit), 0);
    }
}

#[tokio::test]
async fn discovery_emits_only_new_rows() {
    let s = schema();
    let listing = page(
        "https://gov.test/events",
        "- Flood, Port-au-Prince, 1200 affected, 2023-06-03\n- Landslide, Jérémie, 300 affected, 2023-06-05",
    );
    let known = vec![DataPoint::new("r2", "https://gov.test/events")
        .with("event_type", "Flood")
        .with("location", "Port-au-Prince")
        .with("affected", "1200")
        .with("date", "June 3, 2023")];
    let gw = gateway(json!({
        "DISCOVERY:https://gov.test/events": {"records": [
            {"event_type": "Flood", "location": "Port-au-Prince", "affected": 1200, "date": "2023-06-03"},
            {"event_type": "Landslide", "location": "Jérémie", "affected": "300", "date": "2023-06-05"},
            {"event_type": "Landslide", "location": "Jérémie", "affected": "300", "date": "2023-06-05"},
            {"event_type": "Storm", "location": "Les Cayes", "affected": "many", "date": "2023"},
            "junk"
        ]}
    }));
    let out = discover(&listing, &s, "", &known, 40_000, &gw).await.unwrap();
    assert_eq!(out.candidates.len(), 1);
    let d = &out.candidates[0];
    assert_eq!(d.origin, Origin::Discovered);
    assert_eq!(d.source_url, "https://gov.test/events");
    assert_eq!(d.get("location").unwrap().to_string(), "Jérémie");
    assert_eq!(out.dropped.len(), 4);
    assert!(discovery_prompt(&listing, &s, "", &known, 40_000).contains("Port-au-Prince"));

    let gw = gateway(json!({"DISCOVERY:*": "nothing"}));
    assert_eq!(discover(&listing, &s, "", &known, 40_000, &gw).await.unwrap(), DiscoveryOutcome::default());
}
