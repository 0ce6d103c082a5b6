use std::time::Instant;

use futures::{stream, StreamExt};
use tracing::warn;

use super::events::{RowStatus, Stage};
use super::report::RowOutcome;
use super::{Dataset, Finalized, RunError, Services};
use crate::cache::SingleFlight;
use crate::context::{build_context, render_context, render_schema_only, ContextError, OperationalContext};
use crate::finalization::{dedup, integrity_check};
use crate::gateway::{AgentKind, CallUsage, GatewayError};
use crate::remediation::{discover, remediate, LookupServices, PlanInput, RemediationOutcome};
use crate::retrieval::{analysis_hint, classify_layout, LayoutClass, PageContent};
use crate::schema::{coerce_record, DataPoint, FieldValue};
use crate::validators::{
    arbitrate, assess_relevancy, fact_check, FactCheckInput, FactCheckReport, RejectReason, SourceAssessment,
    SourceScrutinizer, Verdict,
};

use super::config::RunConfig;

/// Context fragments per consuming agent, fixed for the run.
struct Fragments {
    relevancy: String,
    fact_check: String,
    remediation: String,
    discovery: String,
    integrity: String,
}

impl Fragments {
    fn new(ctx: Option<&OperationalContext>, dataset: &Dataset, examples: bool) -> Self {
        let render = |kind: AgentKind| match ctx {
            Some(c) => render_context(c, kind, examples),
            None => render_schema_only(&dataset.schema, kind),
        };
        Self {
            relevancy: render(AgentKind::Relevancy),
            fact_check: render(AgentKind::FactCheck),
            remediation: render(AgentKind::RemediationAnalyst),
            discovery: render(AgentKind::Discovery),
            integrity: render(AgentKind::Integrity),
        }
    }
}

struct Committee<'a> {
    dataset: &'a Dataset,
    config: &'a RunConfig,
    services: &'a Services,
    fragments: Fragments,
    scrutinizer: SourceScrutinizer,
    layouts: SingleFlight<String, (LayoutClass, String)>,
}

fn row_usage(services: &Services, kind: AgentKind, key: &str) -> Option<CallUsage> {
    let u = services.gateway.ledger().usage_for(kind, key, services.gateway.model_id());
    (u.prompt_tokens + u.completion_tokens > 0).then_some(u)
}

fn verdict_text(v: &Verdict) -> String {
    if v.is_accept() {
        "ACCEPT".into()
    } else {
        format!("REJECT: {}", v.reasons_text())
    }
}

impl Committee<'_> {
    fn emit(&self, row_id: &str, stage: Stage, reason: impl Into<String>, usage: Option<CallUsage>) {
        self.services
            .events
            .push(row_id, stage, RowStatus::Processing, Some(reason.into()), usage);
    }

    async fn layout_of(&self, page: &PageContent) -> Result<(LayoutClass, String), GatewayError> {
        if !self.config.toggles.layout {
            return Ok(if page.is_unusable() {
                (LayoutClass::ErrorPage, "page has no usable content".into())
            } else {
                (LayoutClass::Other, "layout classification disabled".into())
            });
        }
        let gw = &self.services.gateway;
        self.layouts
            .get_or_try_init(page.url.clone(), || classify_layout(page, gw))
            .await
    }

    async fn source_of(&self, url: &str) -> Result<SourceAssessment, GatewayError> {
        if self.config.toggles.source_scrutiny {
            self.scrutinizer.scrutinize(url, &self.services.gateway).await
        } else {
            Ok(SourceAssessment::neutral("source scrutiny disabled"))
        }
    }

    async fn check_facts(
        &self,
        dp: &DataPoint,
        page: &PageContent,
        layout: LayoutClass,
        out: &mut RowOutcome,
    ) -> Result<FactCheckReport, GatewayError> {
        if !self.config.toggles.fact_check {
            return Ok(FactCheckReport::bypassed());
        }
        let input = FactCheckInput {
            dp,
            schema: &self.dataset.schema,
            page,
            hint: analysis_hint(layout),
            context_fragment: &self.fragments.fact_check,
            minimal: !self.config.toggles.semantic_audit,
            page_budget: self.config.page_budget,
        };
        let (report, truncated) = fact_check(&input, &self.services.gateway).await?;
        out.page_truncated |= truncated || page.truncated;
        let reason = format!(
            "content={} claims={}: {}",
            report.has_meaningful_content, report.supports_claims, report.notes
        );
        self.emit(&dp.row_id, Stage::FactCheck, reason, row_usage(self.services, AgentKind::FactCheck, &dp.row_id));
        Ok(report)
    }

    async fn process_row(&self, dp: &DataPoint) -> RowOutcome {
        let started = Instant::now();
        let mut out = RowOutcome::new(dp);
        self.services
            .events
            .push(&dp.row_id, Stage::Queued, RowStatus::Processing, None, None);
        let mut stage = Stage::Queued;
        if let Err(e) = self.validate_row(dp, &mut out, &mut stage).await {
            out.status = RowStatus::Reject;
            out.processing_failure = true;
            out.record = None;
            out.reasons = vec![format!("processing failure: {e}")];
        }
        out.latency = started.elapsed();
        self.services
            .events
            .push(&dp.row_id, stage, out.status, Some(out.reasons.join("; ")).filter(|r| !r.is_empty()), None);
        out
    }

    async fn validate_row(&self, dp: &DataPoint, out: &mut RowOutcome, stage: &mut Stage) -> Result<(), GatewayError> {
        let toggles = self.config.toggles;
        let schema = &self.dataset.schema;
        let gw = &self.services.gateway;
        let id = dp.row_id.as_str();

        if toggles.relevancy {
            *stage = Stage::Relevancy;
            let v = assess_relevancy(dp, schema, &self.fragments.relevancy, gw).await?;
            let usage = row_usage(self.services, AgentKind::Relevancy, id);
            if !v.is_relevant {
                self.emit(id, Stage::Relevancy, format!("not relevant: {}", v.reason), usage);
                let verdict = Verdict::reject(RejectReason::NotRelevant, v.reason);
                out.reasons = vec![format!("{}: {}", RejectReason::NotRelevant, verdict.notes)];
                out.verdict = Some(verdict);
                out.status = RowStatus::Reject;
                return Ok(());
            }
            self.emit(id, Stage::Relevancy, "relevant", usage);
        }

        *stage = Stage::Fetch;
        let fetch_and_layout = async {
            let page = self.services.fetcher.fetch_page(&dp.source_url).await;
            let layout = self.layout_of(&page).await?;
            Ok::<_, GatewayError>((page, layout))
        };
        let (fetched, source) = tokio::join!(fetch_and_layout, self.source_of(&dp.source_url));
        let (page, (layout, layout_note)) = fetched?;
        let source = source?;
        self.emit(
            id,
            Stage::Fetch,
            if page.http_status == 0 {
                "fetch failed".to_string()
            } else {
                format!("HTTP {}", page.http_status)
            },
            None,
        );
        if toggles.layout {
            self.emit(id, Stage::Layout, format!("{layout}: {layout_note}"), None);
        }
        if toggles.source_scrutiny {
            self.emit(
                id,
                Stage::SourceScrutiny,
                format!("{} ({})", source.reliability, source.source_type),
                None,
            );
        }
        out.layout = Some(layout);
        out.source = Some(source.clone());

        let verdict = if layout == LayoutClass::ErrorPage {
            let mut v = Verdict::reject(RejectReason::FetchFailed, layout_note);
            if source.reliability.is_unreliable() {
                v.reasons.push(RejectReason::UnreliableSource);
            }
            v
        } else {
            *stage = Stage::FactCheck;
            let report = self.check_facts(dp, &page, layout, out).await?;
            let mut v = arbitrate(&report, &source);
            if let Some(found) = &report.extracted_date {
                let row_date = schema
                    .date_field()
                    .and_then(|f| dp.get(&f.name))
                    .and_then(|v| match v {
                        FieldValue::Date(d) => Some(d.clone()),
                        other => crate::schema::normalize_date(&other.to_string()).ok(),
                    });
                if !row_date.is_some_and(|d| d.matches_leniently(found)) {
                    v.notes.push_str(&format!("; page states date {}", found.canonical()));
                }
            }
            out.fact_check = Some(report);
            v
        };
        *stage = Stage::Arbiter;
        self.emit(id, Stage::Arbiter, verdict_text(&verdict), None);
        out.verdict = Some(verdict.clone());

        if verdict.is_accept() {
            if toggles.formatter {
                *stage = Stage::Formatter;
                match coerce_record(dp, schema) {
                    Ok(record) => out.record = Some(record),
                    Err(e) => {
                        out.status = RowStatus::Reject;
                        out.reasons = vec![format!("FORMAT: {e}")];
                        return Ok(());
                    }
                }
            } else {
                out.record = Some(dp.clone());
            }
            out.status = RowStatus::Accept;
            return Ok(());
        }

        out.reasons = verdict.reasons.iter().map(|r| r.as_str().to_string()).collect();
        out.status = RowStatus::Reject;
        if !toggles.remediation {
            return Ok(());
        }

        *stage = Stage::RemediationAnalyst;
        let input = PlanInput {
            dp,
            schema,
            verdict: &verdict,
            page: &page,
            context_fragment: &self.fragments.remediation,
            page_budget: self.config.page_budget,
        };
        let services = LookupServices {
            gateway: gw,
            fetcher: &self.services.fetcher,
            search: self.services.search.as_ref(),
            page_budget: self.config.page_budget,
        };
        let mut steps = Vec::new();
        let outcome = remediate(&input, &services, &mut steps).await?;
        for step in &steps {
            match step.stage {
                AgentKind::RemediationAnalyst => self.emit(
                    id,
                    Stage::RemediationAnalyst,
                    step.note.clone(),
                    row_usage(self.services, AgentKind::RemediationAnalyst, id),
                ),
                _ => self.emit(id, Stage::FactLookup, step.note.clone(), None),
            }
        }
        match &outcome {
            RemediationOutcome::Remediated { record, audit, .. } => {
                *stage = Stage::RemediationAudit;
                self.emit(
                    id,
                    Stage::RemediationAudit,
                    format!("approved: {}", audit.notes),
                    row_usage(self.services, AgentKind::RemediationAudit, id),
                );
                out.record = Some(record.clone());
                out.status = RowStatus::Remediated;
                out.reasons.clear();
            }
            RemediationOutcome::Failed { stage: failed, reason, .. } => {
                *stage = match failed {
                    AgentKind::RemediationAudit => Stage::RemediationAudit,
                    AgentKind::FactLookupExtract => Stage::FactLookup,
                    _ => Stage::RemediationAnalyst,
                };
                out.reasons.push(format!("remediation failed: {reason}"));
            }
        }
        out.remediation = Some(outcome);
        Ok(())
    }

    /// Discovery over every distinct usable page, then validation of the candidates.
    async fn discovery_phase(&self, outcomes: &[RowOutcome], warnings: &mut Vec<String>) -> Vec<RowOutcome> {
        let mut urls: Vec<String> = Vec::new();
        for o in outcomes {
            let fetched = o.layout.is_some_and(|l| l != LayoutClass::ErrorPage);
            if fetched && !urls.contains(&o.source_url) {
                urls.push(o.source_url.clone());
            }
        }
        let parallelism = self.config.parallelism.max(1);
        let found: Vec<(String, Result<Vec<DataPoint>, GatewayError>)> = stream::iter(urls)
            .map(|url: String| async move {
                let page = self.services.fetcher.fetch_page(&url).await;
                let known: Vec<DataPoint> = self
                    .dataset
                    .rows
                    .iter()
                    .filter(|dp| dp.source_url == url)
                    .cloned()
                    .collect();
                let result = discover(
                    &page,
                    &self.dataset.schema,
                    &self.fragments.discovery,
                    &known,
                    self.config.page_budget,
                    &self.services.gateway,
                )
                .await
                .map(|o| o.candidates);
                (url, result)
            })
            .buffered(parallelism)
            .collect()
            .await;

        let mut candidates = Vec::new();
        for (url, result) in found {
            match result {
                Ok(list) => candidates.extend(list),
                Err(e) => {
                    warn!(url, error = %e, "discovery failed");
                    warnings.push(format!("discovery failed for {url}: {e}"));
                }
            }
        }
        for (i, c) in candidates.iter_mut().enumerate() {
            c.row_id = format!("d{}", i + 1);
        }
        stream::iter(candidates)
            .map(|c| async move { self.validate_discovered(c).await })
            .buffered(parallelism)
            .collect()
            .await
    }

    async fn validate_discovered(&self, candidate: DataPoint) -> RowOutcome {
        let started = Instant::now();
        let id = candidate.row_id.clone();
        let mut out = RowOutcome::new(&candidate);
        self.services.events.push(
            &id,
            Stage::Discovery,
            RowStatus::Processing,
            Some(format!("found on {}", candidate.source_url)),
            None,
        );
        let result = async {
            let page = self.services.fetcher.fetch_page(&candidate.source_url).await;
            let (layout, _) = self.layout_of(&page).await?;
            let source = self.source_of(&candidate.source_url).await?;
            let report = self.check_facts(&candidate, &page, layout, &mut out).await?;
            Ok::<_, GatewayError>((layout, source, report))
        }
        .await;
        let stage = match result {
            Ok((layout, source, report)) => {
                let verdict = arbitrate(&report, &source);
                out.layout = Some(layout);
                out.source = Some(source);
                out.fact_check = Some(report);
                if verdict.is_accept() {
                    out.status = RowStatus::Discovered;
                    out.record = Some(candidate);
                } else {
                    out.status = RowStatus::Reject;
                    out.reasons = verdict.reasons.iter().map(|r| r.as_str().to_string()).collect();
                }
                out.verdict = Some(verdict);
                Stage::Arbiter
            }
            Err(e) => {
                out.status = RowStatus::Reject;
                out.processing_failure = true;
                out.reasons = vec![format!("processing failure: {e}")];
                Stage::FactCheck
            }
        };
        out.latency = started.elapsed();
        self.services
            .events
            .push(&id, stage, out.status, Some(out.reasons.join("; ")).filter(|r| !r.is_empty()), None);
        out
    }
}

pub(super) async fn run_committee(
    dataset: &Dataset,
    config: &RunConfig,
    services: &Services,
) -> Result<(Vec<RowOutcome>, Finalized), RunError> {
    let toggles = config.toggles;
    let mut warnings = Vec::new();
    let mut context = None;
    if toggles.context && !dataset.rows.is_empty() {
        match build_context(&dataset.rows, &dataset.schema, config.seed, toggles.context_learning, &services.gateway)
            .await
        {
            Ok(ctx) => context = Some(ctx),
            Err(ContextError::Gateway(e)) if !e.is_parse_exhausted() => return Err(RunError::Provider(e)),
            Err(e) => {
                warn!(error = %e, "context generation failed; using schema-only prompts");
                warnings.push(format!("context generation failed, schema-only prompts used: {e}"));
            }
        }
    }
    let committee = Committee {
        dataset,
        config,
        services,
        fragments: Fragments::new(context.as_ref(), dataset, toggles.context_examples),
        scrutinizer: SourceScrutinizer::new(),
        layouts: SingleFlight::new(),
    };

    let committee_ref = &committee;
    let rows = &dataset.rows;
    let mut outcomes: Vec<RowOutcome> = stream::iter(0..rows.len())
        .map(|i| committee_ref.process_row(&rows[i]))
        .buffered(config.parallelism.max(1))
        .collect()
        .await;

    if toggles.discovery {
        let discovered = committee.discovery_phase(&outcomes, &mut warnings).await;
        outcomes.extend(discovered);
    }

    let staged: Vec<DataPoint> = outcomes.iter().filter_map(|o| o.record.clone()).collect();
    let deduped = dedup(&staged, &dataset.schema);
    let mut dropped = deduped.dropped;
    let (records, findings) = match integrity_check(
        deduped.kept.clone(),
        &dataset.schema,
        &committee.fragments.integrity,
        toggles.integrity,
        &services.gateway,
    )
    .await
    {
        Ok(r) => {
            warnings.extend(r.warnings);
            dropped.extend(r.rejected);
            (r.accepted, r.findings)
        }
        Err(e) => {
            warnings.push(format!("integrity check failed, records passed unchecked: {e}"));
            (deduped.kept, Vec::new())
        }
    };
    Ok((
        outcomes,
        Finalized {
            records,
            dropped,
            findings,
            warnings,
            context,
        },
    ))
}
