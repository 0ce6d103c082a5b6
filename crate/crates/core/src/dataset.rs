//! CSV input and output.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::schema::{DataPoint, FieldValue, SchemaSpec};

pub const DEFAULT_URL_COLUMN: &str = "source_url";
pub const ORIGIN_COLUMN: &str = "origin";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unreadable CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("input has no header row")]
    NoHeader,
    #[error("URL column {0:?} not found in header")]
    NoUrlColumn(String),
    #[error("schema field {0:?} has no column in the input")]
    MissingColumn(String),
    #[error("no row has a valid http(s) URL in column {0:?}")]
    NoValidUrl(String),
    #[error("duplicate column {0:?} in header")]
    DuplicateColumn(String),
}

/// Header plus rows keyed by column name, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<BTreeMap<String, String>>,
}

pub fn read_csv<R: Read>(reader: R) -> Result<RawTable, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.iter().all(String::is_empty) {
        return Err(DatasetError::NoHeader);
    }
    for (i, h) in headers.iter().enumerate() {
        if headers[..i].contains(h) {
            return Err(DatasetError::DuplicateColumn(h.clone()));
        }
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let row = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.clone(), record.get(i).unwrap_or_default().to_string()))
            .collect();
        rows.push(row);
    }
    Ok(RawTable { headers, rows })
}

fn valid_url(s: &str) -> bool {
    url::Url::parse(s.trim()).is_ok_and(|u| matches!(u.scheme(), "http" | "https") && u.host().is_some())
}

/// Builds data points with ids `r1`, `r2`, … in file order. Columns outside the
/// schema (other than the URL column) become passthrough values.
pub fn build_dataset(table: &RawTable, schema: &SchemaSpec, url_column: &str) -> Result<Vec<DataPoint>, DatasetError> {
    if !table.headers.iter().any(|h| h == url_column) {
        return Err(DatasetError::NoUrlColumn(url_column.to_string()));
    }
    for f in &schema.fields {
        if f.required && !table.headers.contains(&f.name) {
            return Err(DatasetError::MissingColumn(f.name.clone()));
        }
    }
    if !table.rows.is_empty() && !table.rows.iter().any(|r| r.get(url_column).is_some_and(|u| valid_url(u))) {
        return Err(DatasetError::NoValidUrl(url_column.to_string()));
    }
    Ok(table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut dp = DataPoint::new(format!("r{}", i + 1), row[url_column].trim());
            for (col, value) in row {
                if col == url_column {
                    continue;
                }
                if schema.field(col).is_some() {
                    dp.values.insert(col.clone(), FieldValue::Text(value.clone()));
                } else {
                    dp.passthrough.insert(col.clone(), value.clone());
                }
            }
            dp
        })
        .collect())
}

/// Output columns: schema fields, passthrough columns (input order), origin, source URL.
pub fn output_columns(schema: &SchemaSpec, passthrough: &[String], url_column: &str) -> Vec<String> {
    let mut cols: Vec<String> = schema.field_names().map(str::to_string).collect();
    cols.extend(passthrough.iter().cloned());
    cols.push(ORIGIN_COLUMN.to_string());
    cols.push(url_column.to_string());
    cols
}

/// Passthrough column names in header order.
pub fn passthrough_columns(table: &RawTable, schema: &SchemaSpec, url_column: &str) -> Vec<String> {
    table
        .headers
        .iter()
        .filter(|h| h.as_str() != url_column && schema.field(h).is_none())
        .cloned()
        .collect()
}

pub fn write_csv<W: Write>(
    writer: W,
    records: &[DataPoint],
    schema: &SchemaSpec,
    passthrough: &[String],
    url_column: &str,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(output_columns(schema, passthrough, url_column))?;
    for dp in records {
        let mut row: Vec<String> = schema
            .fields
            .iter()
            .map(|f| dp.get(&f.name).map(FieldValue::to_string).unwrap_or_default())
            .collect();
        row.extend(passthrough.iter().map(|c| dp.passthrough.get(c).cloned().unwrap_or_default()));
        row.push(dp.origin.as_str().to_string());
        row.push(dp.source_url.clone());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(records: &[DataPoint], schema: &SchemaSpec, passthrough: &[String], url_column: &str) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, records, schema, passthrough, url_column).expect("writing CSV to memory");
    String::from_utf8(buf).expect("CSV output is UTF-8")
}
