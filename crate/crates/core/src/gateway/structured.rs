//! Tolerant extraction of a fenced JSON block from free-form completions.

use std::sync::LazyLock;

use regex::Regex;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Bool,
    Text,
    Number,
    List,
    Object,
    /// Any JSON value, including null.
    Any,
}

impl FieldKind {
    fn accepts(self, v: &Value) -> bool {
        match self {
            FieldKind::Bool => v.is_boolean(),
            FieldKind::Text => v.is_string(),
            FieldKind::Number => v.is_number(),
            FieldKind::List => v.is_array(),
            FieldKind::Object => v.is_object(),
            FieldKind::Any => true,
        }
    }

    fn name(self) -> &'static str {
        match self {
            FieldKind::Bool => "boolean",
            FieldKind::Text => "string",
            FieldKind::Number => "number",
            FieldKind::List => "list",
            FieldKind::Object => "object",
            FieldKind::Any => "any",
        }
    }
}

/// The set of top-level fields a structured reply must carry.
#[derive(Debug, Clone, Default)]
pub struct ResponseShape {
    fields: Vec<(String, FieldKind, bool)>,
}

impl ResponseShape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(mut self, name: &str, kind: FieldKind) -> Self {
        self.fields.push((name.to_string(), kind, true));
        self
    }

    /// Field that may be absent or null.
    pub fn optional(mut self, name: &str, kind: FieldKind) -> Self {
        self.fields.push((name.to_string(), kind, false));
        self
    }

    pub fn check(&self, value: &Value) -> Result<(), ShapeError> {
        let obj = value.as_object().ok_or(ShapeError::NotAnObject)?;
        for (name, kind, required) in &self.fields {
            match obj.get(name) {
                None | Some(Value::Null) if !*required => {}
                None => return Err(ShapeError::MissingField(name.clone())),
                Some(v) if !kind.accepts(v) => {
                    return Err(ShapeError::WrongKind {
                        field: name.clone(),
                        expected: kind.name(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Human-readable description for prompts, e.g. `is_relevant: boolean`.
    pub fn describe(&self) -> String {
        self.fields
            .iter()
            .map(|(n, k, req)| {
                if *req {
                    format!("- {n}: {}", k.name())
                } else {
                    format!("- {n}: {} (optional)", k.name())
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("no JSON object found in the response")]
    NoJson,
    #[error("the structured block is not a JSON object")]
    NotAnObject,
    #[error("required field `{0}` is missing")]
    MissingField(String),
    #[error("field `{field}` must be a {expected}")]
    WrongKind { field: String, expected: &'static str },
}

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```[A-Za-z0-9_-]*[ \t]*\r?\n(.*?)```").unwrap());

fn candidates(text: &str) -> Vec<Value> {
    let mut out: Vec<Value> = FENCE
        .captures_iter(text)
        .filter_map(|c| serde_json::from_str(c[1].trim()).ok())
        .collect();
    if !out.is_empty() {
        return out;
    }
    if let Ok(v) = serde_json::from_str::<Value>(text.trim()) {
        out.push(v);
        return out;
    }
    if let (Some(start), Some(end)) = (text.find('{'), text.rfind('}')) {
        if start < end {
            if let Ok(v) = serde_json::from_str::<Value>(&text[start..=end]) {
                out.push(v);
            }
        }
    }
    out
}

/// Returns the first well-formed JSON block, validated against `shape`.
pub fn extract_structured(text: &str, shape: &ResponseShape) -> Result<Value, ShapeError> {
    let first = candidates(text).into_iter().next().ok_or(ShapeError::NoJson)?;
    shape.check(&first)?;
    Ok(first)
}
