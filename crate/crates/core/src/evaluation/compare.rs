use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::{evaluate_report, round1, GroundTruth, Metrics};
use crate::dataset::RawTable;
use crate::orchestrator::{prepare_dataset, run, RowStatus, RunConfig, RunError, Services};

/// One configuration to execute in a comparison.
pub struct RunRequest {
    pub config: RunConfig,
    pub services: Result<Services, RunError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delta {
    #[serde(with = "rust_decimal::serde::str")]
    pub precision: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub recall: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub f1: Decimal,
    #[serde(with = "rust_decimal::serde::str_option")]
    pub remediation_recall: Option<Decimal>,
}

impl Delta {
    pub fn between(run: &Metrics, baseline: &Metrics) -> Self {
        Self {
            precision: round1(run.precision - baseline.precision),
            recall: round1(run.recall - baseline.recall),
            f1: round1(run.f1 - baseline.f1),
            remediation_recall: run
                .remediation_recall
                .zip(baseline.remediation_recall)
                .map(|(a, b)| round1(a - b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Delta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status_counts: Option<BTreeMap<RowStatus, usize>>,
    #[serde(default)]
    pub model_calls: usize,
    /// Set when the run aborted; the row then has no metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Label of the row deltas are taken against (the first request).
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

async fn execute(input: &RawTable, gt: &RawTable, request: RunRequest) -> ComparisonRow {
    let RunRequest { config, services } = request;
    let mut row = ComparisonRow {
        label: config.display_label(),
        config: config.clone(),
        metrics: None,
        delta: None,
        status_counts: None,
        model_calls: 0,
        error: None,
    };
    let outcome = async {
        let services = services?;
        let dataset = prepare_dataset(input, &config)?;
        let truth = GroundTruth::from_table(gt, &dataset.schema).map_err(|e| e.to_string());
        let report = run(&dataset, &config, &services).await?;
        Ok::<_, RunError>((report, truth))
    }
    .await;
    match outcome {
        Ok((report, Ok(truth))) => {
            row.metrics = Some(evaluate_report(&report, &truth));
            row.status_counts = Some(report.status_counts.clone());
            row.model_calls = report.totals.model_calls;
        }
        Ok((_, Err(e))) => row.error = Some(e),
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs every request against the same input and reference and tabulates the
/// results, with deltas against the first request. Aborted runs become failed
/// rows. Runs are sequential unless `concurrent` is set.
pub async fn run_comparison(
    input: &RawTable,
    gt: &RawTable,
    requests: Vec<RunRequest>,
    concurrent: bool,
) -> ComparisonReport {
    let mut rows = Vec::with_capacity(requests.len());
    if concurrent {
        rows = futures::future::join_all(requests.into_iter().map(|r| execute(input, gt, r))).await;
    } else {
        for r in requests {
            rows.push(execute(input, gt, r).await);
        }
    }
    let baseline = rows.first().map(|r| r.label.clone()).unwrap_or_default();
    let base_metrics = rows.first().and_then(|r| r.metrics.clone());
    for row in &mut rows {
        if let (Some(m), Some(b)) = (&row.metrics, &base_metrics) {
            row.delta = Some(Delta::between(m, b));
        }
    }
    ComparisonReport { baseline, rows }
}

fn signed(d: Decimal) -> String {
    if d > Decimal::ZERO {
        format!("+{d}")
    } else {
        d.to_string()
    }
}

fn cell(value: Option<Decimal>, delta: Option<Decimal>) -> String {
    match (value, delta) {
        (Some(v), Some(d)) => format!("{v} ({})", signed(d)),
        (Some(v), None) => v.to_string(),
        (None, _) => "n/a".into(),
    }
}

/// Fixed-width plain-text table.
pub fn render_table(report: &ComparisonReport) -> String {
    let header = ["System", "F1", "P", "R", "Rem", "Time", "Lat", "Cost"];
    let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for row in &report.rows {
        let mut line = vec![row.label.clone()];
        match &row.metrics {
            Some(m) => {
                let d = row.delta.as_ref();
                let precision = m.precision_applicable.then_some(m.precision);
                line.push(cell(Some(m.f1), d.map(|d| d.f1)));
                line.push(cell(precision, d.map(|d| d.precision)));
                line.push(cell(Some(m.recall), d.map(|d| d.recall)));
                line.push(cell(m.remediation_recall, d.and_then(|d| d.remediation_recall)));
                line.push(format!("{:.1}s", m.time_total.as_secs_f64()));
                line.push(format!("{:.1}s", m.latency_mean.as_secs_f64()));
                line.push(format!("${:.2}", m.cost_total.round_dp(2)));
            }
            None => line.push(format!("FAILED: {}", row.error.as_deref().unwrap_or("unknown error"))),
        }
        lines.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| lines.iter().filter_map(|l| l.get(i)).map(|c| c.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (n, line) in lines.iter().enumerate() {
        let cells: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(i, c)| if i + 1 == line.len() { c.clone() } else { format!("{c:<w$}", w = widths[i]) })
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if n == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Cost against F1 scatter; bubble area grows with total processing time.
pub fn render_chart_svg(report: &ComparisonReport) -> String {
    const W: f64 = 720.0;
    const H: f64 = 440.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 30.0;
    const TOP: f64 = 30.0;
    const BOTTOM: f64 = 60.0;
    let points: Vec<(&str, f64, f64, f64)> = report
        .rows
        .iter()
        .filter_map(|r| {
            let m = r.metrics.as_ref()?;
            Some((
                r.label.as_str(),
                m.cost_total.to_f64().unwrap_or(0.0),
                m.f1.to_f64().unwrap_or(0.0),
                m.time_total.as_secs_f64(),
            ))
        })
        .collect();
    let max_cost = points.iter().map(|p| p.1).fold(0.0, f64::max);
    let max_cost = if max_cost > 0.0 { max_cost * 1.1 } else { 1.0 };
    let max_time = points.iter().map(|p| p.3).fold(0.0, f64::max);
    let x = |c: f64| LEFT + c / max_cost * (W - LEFT - RIGHT);
    let y = |f: f64| H - BOTTOM - f / 100.0 * (H - TOP - BOTTOM);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{y0}" stroke="black"/>"#,
        y0 = H - BOTTOM,
        x1 = W - RIGHT
    );
    for tick in (0..=100).step_by(20) {
        let ty = y(tick as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{ty:.1}" x2="{x1}" y2="{ty:.1}" stroke="#ddd"/><text x="{tx}" y="{ly:.1}" text-anchor="end">{tick}</text>"##,
            x1 = W - RIGHT,
            tx = LEFT - 6.0,
            ly = ty + 4.0
        );
    }
    for i in 0..=4 {
        let c = max_cost * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{tx:.1}" y="{ty}" text-anchor="middle">${c:.2}</text>"#,
            tx = x(c),
            ty = H - BOTTOM + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{cx}" y="{by}" text-anchor="middle">Cost (USD)</text><text x="18" y="{cy}" text-anchor="middle" transform="rotate(-90 18 {cy})">F1 (%)</text>"#,
        cx = (LEFT + W - RIGHT) / 2.0,
        by = H - 14.0,
        cy = (TOP + H - BOTTOM) / 2.0
    );
    for (label, cost, f1, time) in points {
        let r = if max_time > 0.0 { 6.0 + 24.0 * (time / max_time).sqrt() } else { 6.0 };
        let (cx, cy) = (x(cost), y(f1));
        let _ = writeln!(
            svg,
            r##"<circle cx="{cx:.1}" cy="{cy:.1}" r="{r:.1}" fill="#4a7bd0" fill-opacity="0.45" stroke="#24467f"/><text x="{cx:.1}" y="{ly:.1}" text-anchor="middle">{}</text>"##,
            xml_escape(label),
            ly = cy - r - 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `comparison.json`, `comparison.txt` and `comparison.svg` into `dir`.
pub fn write_comparison(dir: &Path, report: &ComparisonReport) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("comparison.json"), json + "\n")?;
    std::fs::write(dir.join("comparison.txt"), render_table(report))?;
    std::fs::write(dir.join("comparison.svg"), render_chart_svg(report))?;
    Ok(())
}
