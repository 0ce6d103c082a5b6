//! On-disk layout of a finished run.
//!
//! ```text
//! <dir>/config.json      run configuration (never holds a credential)
//! <dir>/report.json      full report
//! <dir>/output.csv       final records
//! <dir>/events.jsonl     event log, one event per line
//! <dir>/usage.jsonl      model-call ledger
//! <dir>/fetches.jsonl    fetch transcript
//! <dir>/dropped.jsonl    records removed during finalization
//! <dir>/context.md       operational context, when one was generated
//! <dir>/pages/           page snapshots, when the fetcher was given this directory
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::report::RunReport;
use crate::schema::{coerce_value, DataPoint, SchemaSpec};

pub const PAGES_DIR: &str = "pages";

pub fn pages_dir(run_dir: &Path) -> PathBuf {
    run_dir.join(PAGES_DIR)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()
}

pub fn write_run_dir(dir: &Path, report: &RunReport) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), &report.config)?;
    write_json(&dir.join("report.json"), report)?;
    fs::write(dir.join("output.csv"), report.output_csv())?;
    write_jsonl(&dir.join("events.jsonl"), &report.events)?;
    write_jsonl(&dir.join("usage.jsonl"), &report.ledger)?;
    write_jsonl(&dir.join("fetches.jsonl"), &report.fetches)?;
    write_jsonl(&dir.join("dropped.jsonl"), &report.dropped)?;
    if let Some(ctx) = &report.context {
        fs::write(dir.join("context.md"), ctx.to_document())?;
    }
    Ok(())
}

/// Reads `report.json` back. Values are stored as canonical strings, so a
/// value is retyped only when coercion reproduces exactly that string.
pub fn read_report(dir: &Path) -> std::io::Result<RunReport> {
    let text = fs::read_to_string(dir.join("report.json"))?;
    let mut report: RunReport = serde_json::from_str(&text).map_err(std::io::Error::other)?;
    let schema = report.schema.clone();
    let records = report
        .records
        .iter_mut()
        .chain(report.outcomes.iter_mut().filter_map(|o| o.record.as_mut()));
    for dp in records {
        retype(dp, &schema);
    }
    Ok(report)
}

fn retype(dp: &mut DataPoint, schema: &SchemaSpec) {
    for field in &schema.fields {
        let Some(value) = dp.values.get_mut(&field.name) else {
            continue;
        };
        if let Some(typed) = coerce_value(value, field.field_type) {
            if typed.to_string() == value.to_string() {
                *value = typed;
            }
        }
    }
}
