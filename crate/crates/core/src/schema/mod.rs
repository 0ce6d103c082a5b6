//! Dynamic schema model, typed records and the formatter's coercion rules.

mod date;
mod record;

pub use date::{normalize_date, DatePrecision, DateValue, UnparseableDate};
pub use record::{
    coerce_record, coerce_value, parse_decimal, parse_integer, validate_record, CoerceError,
    DataPoint, FieldValue, Origin, Violation, ViolationKind,
};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FieldType {
    Text,
    Integer,
    Float,
    Date,
}

impl FieldType {
    pub fn annotation(self) -> &'static str {
        match self {
            FieldType::Text => "text",
            FieldType::Integer => "int",
            FieldType::Float => "float",
            FieldType::Date => "date",
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, FieldType::Integer | FieldType::Float)
    }
}

impl FromStr for FieldType {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => Ok(FieldType::Text),
            "int" => Ok(FieldType::Integer),
            "float" => Ok(FieldType::Float),
            "date" => Ok(FieldType::Date),
            other => Err(SchemaError::UnknownType(other.to_string())),
        }
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.annotation())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub field_type: FieldType,
    #[serde(default = "default_required")]
    pub required: bool,
}

fn default_required() -> bool {
    true
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, field_type: FieldType) -> Self {
        Self {
            name: name.into(),
            field_type,
            required: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("schema must declare at least one field")]
    Empty,
    #[error("empty field name at position {0}")]
    EmptyName(usize),
    #[error("invalid field name {0:?}")]
    InvalidName(String),
    #[error("duplicate field name {0:?}")]
    DuplicateField(String),
    #[error("unknown type annotation {0:?} (expected text, int, float or date)")]
    UnknownType(String),
}

impl SchemaError {
    /// The field the error refers to, when there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            SchemaError::InvalidName(n) | SchemaError::DuplicateField(n) => Some(n),
            _ => None,
        }
    }
}

/// The structured format every agent must adhere to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub fields: Vec<FieldSpec>,
    pub dataset_description: String,
}

impl SchemaSpec {
    /// Builds a schema after checking names for emptiness, separators and duplicates.
    pub fn new(fields: Vec<FieldSpec>, dataset_description: impl Into<String>) -> Result<Self, SchemaError> {
        if fields.is_empty() {
            return Err(SchemaError::Empty);
        }
        let mut seen = HashSet::new();
        let mut date_named = 0;
        for (i, f) in fields.iter().enumerate() {
            check_name(&f.name, i)?;
            if !seen.insert(f.name.clone()) {
                return Err(SchemaError::DuplicateField(f.name.clone()));
            }
            if f.name.eq_ignore_ascii_case("date") {
                date_named += 1;
                if date_named > 1 {
                    return Err(SchemaError::DuplicateField(f.name.clone()));
                }
            }
        }
        Ok(Self {
            fields,
            dataset_description: dataset_description.into(),
        })
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }

    /// The field that drives date-granular deduplication: the one named `date`.
    pub fn date_field(&self) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name.eq_ignore_ascii_case("date"))
    }

    /// Renders the schema back into the `name:type,...` mini-grammar.
    pub fn to_annotation(&self) -> String {
        self.fields
            .iter()
            .map(|f| format!("{}:{}", f.name, f.field_type))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn check_name(name: &str, position: usize) -> Result<(), SchemaError> {
    if name.is_empty() {
        return Err(SchemaError::EmptyName(position));
    }
    let bad = name.trim() != name
        || name
            .chars()
            .any(|c| c.is_control() || matches!(c, ',' | ':' | '|' | '\\'));
    if bad {
        return Err(SchemaError::InvalidName(name.to_string()));
    }
    Ok(())
}

/// One entry of the annotation grammar: a name plus an optional explicit type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldAnnotation {
    pub name: String,
    pub field_type: Option<FieldType>,
}

/// Parses the comma-separated `name` / `name:type` grammar.
pub fn parse_annotations(spec: &str) -> Result<Vec<FieldAnnotation>, SchemaError> {
    if spec.trim().is_empty() {
        return Err(SchemaError::Empty);
    }
    spec.split(',')
        .enumerate()
        .map(|(i, item)| parse_annotation(item, i))
        .collect()
}

fn parse_annotation(item: &str, position: usize) -> Result<FieldAnnotation, SchemaError> {
    let (name, ty) = match item.split_once(':') {
        Some((name, ty)) => (name.trim(), Some(ty.parse::<FieldType>()?)),
        None => (item.trim(), None),
    };
    check_name(name, position)?;
    Ok(FieldAnnotation {
        name: name.to_string(),
        field_type: ty,
    })
}

/// Infers a field type from sample values: integer, then decimal, then date, else text.
pub fn infer_type<'a>(name: &str, samples: impl IntoIterator<Item = &'a str>) -> FieldType {
    let values: Vec<&str> = samples
        .into_iter()
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .collect();
    if name.eq_ignore_ascii_case("date") {
        return FieldType::Date;
    }
    if values.is_empty() {
        return FieldType::Text;
    }
    if values.iter().all(|v| parse_integer(v).is_some()) {
        FieldType::Integer
    } else if values.iter().all(|v| parse_decimal(v).is_some()) {
        FieldType::Float
    } else if values.iter().all(|v| normalize_date(v).is_ok()) {
        FieldType::Date
    } else {
        FieldType::Text
    }
}

/// Generates the schema from user field specs; explicit annotations win over inference.
pub fn generate_schema<S: AsRef<str>>(
    field_specs: &[S],
    sample_rows: &[BTreeMap<String, String>],
    dataset_description: &str,
) -> Result<SchemaSpec, SchemaError> {
    if field_specs.is_empty() {
        return Err(SchemaError::Empty);
    }
    let fields = field_specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let ann = parse_annotation(spec.as_ref(), i)?;
            let field_type = ann.field_type.unwrap_or_else(|| {
                infer_type(
                    &ann.name,
                    sample_rows
                        .iter()
                        .filter_map(|row| row.get(&ann.name).map(String::as_str)),
                )
            });
            Ok(FieldSpec::new(ann.name, field_type))
        })
        .collect::<Result<Vec<_>, SchemaError>>()?;
    SchemaSpec::new(fields, dataset_description)
}

/// Convenience over [`generate_schema`] for the comma-separated CLI form.
pub fn schema_from_annotation(
    annotation: &str,
    sample_rows: &[BTreeMap<String, String>],
    dataset_description: &str,
) -> Result<SchemaSpec, SchemaError> {
    if annotation.trim().is_empty() {
        return Err(SchemaError::Empty);
    }
    let items: Vec<&str> = annotation.split(',').collect();
    generate_schema(&items, sample_rows, dataset_description)
}
