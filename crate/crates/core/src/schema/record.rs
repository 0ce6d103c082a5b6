use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use rust_decimal::Decimal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::date::{normalize_date, DateValue};
use super::{FieldType, SchemaSpec};

/// A field value, either raw text from the input or a coerced typed value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldValue {
    Text(String),
    Integer(i64),
    Float(Decimal),
    Date(DateValue),
}

impl FieldValue {
    pub fn text(s: impl Into<String>) -> Self {
        FieldValue::Text(s.into())
    }

    pub fn is_blank(&self) -> bool {
        matches!(self, FieldValue::Text(s) if s.trim().is_empty())
    }

    /// JSON rendering used in prompts: numbers stay numbers.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            FieldValue::Text(s) => serde_json::Value::String(s.clone()),
            FieldValue::Integer(i) => serde_json::Value::from(*i),
            FieldValue::Float(d) => serde_json::Value::Number(
                serde_json::Number::from_str(&d.to_string())
                    .unwrap_or_else(|_| serde_json::Number::from(0)),
            ),
            FieldValue::Date(d) => serde_json::Value::String(d.canonical().to_string()),
        }
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Text(s) => f.write_str(s),
            FieldValue::Integer(i) => write!(f, "{i}"),
            FieldValue::Float(d) => write!(f, "{d}"),
            FieldValue::Date(d) => f.write_str(d.canonical()),
        }
    }
}

// Serialized as the canonical string; typing is recovered by coercion.
impl Serialize for FieldValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FieldValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer).map(FieldValue::Text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    Initial,
    Remediated,
    Discovered,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Initial => "INITIAL",
            Origin::Remediated => "REMEDIATED",
            Origin::Discovered => "DISCOVERED",
        }
    }
}

/// One row of the dataset under validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPoint {
    pub row_id: String,
    pub values: BTreeMap<String, FieldValue>,
    /// Input columns outside the schema, re-emitted untouched.
    #[serde(default)]
    pub passthrough: BTreeMap<String, String>,
    pub source_url: String,
    pub origin: Origin,
}

impl DataPoint {
    pub fn new(row_id: impl Into<String>, source_url: impl Into<String>) -> Self {
        Self {
            row_id: row_id.into(),
            values: BTreeMap::new(),
            passthrough: BTreeMap::new(),
            source_url: source_url.into(),
            origin: Origin::Initial,
        }
    }

    pub fn with(mut self, field: &str, value: impl Into<String>) -> Self {
        self.values.insert(field.to_string(), FieldValue::Text(value.into()));
        self
    }

    pub fn get(&self, field: &str) -> Option<&FieldValue> {
        self.values.get(field)
    }

    /// Schema-ordered JSON object of the field values, for prompts.
    pub fn values_json(&self, schema: &SchemaSpec) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for f in &schema.fields {
            let v = self
                .values
                .get(&f.name)
                .map(FieldValue::to_json)
                .unwrap_or(serde_json::Value::Null);
            map.insert(f.name.clone(), v);
        }
        serde_json::Value::Object(map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationKind {
    Missing,
    TypeMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoerceError {
    #[error("required field {field:?} is missing")]
    Missing { field: String },
    #[error("value {raw:?} for field {field:?} cannot be coerced")]
    UncoercibleValue { field: String, raw: String },
}

static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[+-]?\d+$").unwrap());
static DECIMAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[+-]?(?:\d+(?:\.\d*)?|\.\d+)$").unwrap());

fn strip_numeric(raw: &str) -> String {
    raw.chars().filter(|c| *c != ',' && !c.is_whitespace()).collect()
}

/// Integer parse tolerating `,` thousands separators and whitespace only.
pub fn parse_integer(raw: &str) -> Option<i64> {
    let s = strip_numeric(raw);
    if !INTEGER.is_match(&s) {
        return None;
    }
    s.parse().ok()
}

/// Decimal parse with the same tolerance as [`parse_integer`]; normalized scale.
pub fn parse_decimal(raw: &str) -> Option<Decimal> {
    let s = strip_numeric(raw);
    if !DECIMAL.is_match(&s) {
        return None;
    }
    Decimal::from_str(&s).ok().map(|d| d.normalize())
}

fn conforms(value: &FieldValue, ty: FieldType) -> bool {
    match (value, ty) {
        (FieldValue::Text(_), FieldType::Text) => true,
        (FieldValue::Integer(_), FieldType::Integer) => true,
        (FieldValue::Float(_) | FieldValue::Integer(_), FieldType::Float) => true,
        (FieldValue::Date(_), FieldType::Date) => true,
        (FieldValue::Text(s), ty) => coerce_text(s, ty).is_some(),
        _ => false,
    }
}

fn coerce_text(raw: &str, ty: FieldType) -> Option<FieldValue> {
    match ty {
        FieldType::Text => Some(FieldValue::Text(raw.trim().to_string())),
        FieldType::Integer => parse_integer(raw).map(FieldValue::Integer),
        FieldType::Float => parse_decimal(raw).map(FieldValue::Float),
        FieldType::Date => normalize_date(raw).ok().map(FieldValue::Date),
    }
}

/// Coerces one value to `ty`; `None` when it cannot be normalized.
pub fn coerce_value(value: &FieldValue, ty: FieldType) -> Option<FieldValue> {
    match (value, ty) {
        (FieldValue::Text(s), _) => coerce_text(s, ty),
        (FieldValue::Integer(_), FieldType::Integer) => Some(value.clone()),
        (FieldValue::Integer(i), FieldType::Float) => Some(FieldValue::Float(Decimal::from(*i))),
        (FieldValue::Float(d), FieldType::Float) => Some(FieldValue::Float(d.normalize())),
        (FieldValue::Float(d), FieldType::Integer) if d.fract().is_zero() => {
            i64::try_from(*d).ok().map(FieldValue::Integer)
        }
        (FieldValue::Date(_), FieldType::Date) => Some(value.clone()),
        (other, FieldType::Text) => Some(FieldValue::Text(other.to_string())),
        _ => None,
    }
}

/// Structural consistency check: every required field present, non-empty and parseable.
pub fn validate_record(dp: &DataPoint, schema: &SchemaSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    for f in &schema.fields {
        match dp.values.get(&f.name) {
            None => {
                if f.required {
                    out.push(Violation {
                        field: f.name.clone(),
                        kind: ViolationKind::Missing,
                    });
                }
            }
            Some(v) if v.is_blank() => {
                if f.required {
                    out.push(Violation {
                        field: f.name.clone(),
                        kind: ViolationKind::Missing,
                    });
                }
            }
            Some(v) => {
                if !conforms(v, f.field_type) {
                    out.push(Violation {
                        field: f.name.clone(),
                        kind: ViolationKind::TypeMismatch,
                    });
                }
            }
        }
    }
    out
}

/// The formatter: normalizes every schema field to its declared type.
///
/// Blank optional fields are dropped; blank required fields are an error.
/// Idempotent on its own output.
pub fn coerce_record(dp: &DataPoint, schema: &SchemaSpec) -> Result<DataPoint, CoerceError> {
    let mut out = dp.clone();
    out.values.retain(|k, _| schema.field(k).is_some());
    for f in &schema.fields {
        let Some(value) = out.values.get(&f.name) else {
            if f.required {
                return Err(CoerceError::Missing {
                    field: f.name.clone(),
                });
            }
            continue;
        };
        if value.is_blank() {
            if f.required {
                return Err(CoerceError::Missing {
                    field: f.name.clone(),
                });
            }
            out.values.remove(&f.name);
            continue;
        }
        let coerced = coerce_value(value, f.field_type).ok_or_else(|| CoerceError::UncoercibleValue {
            field: f.name.clone(),
            raw: value.to_string(),
        })?;
        out.values.insert(f.name.clone(), coerced);
    }
    Ok(out)
}
