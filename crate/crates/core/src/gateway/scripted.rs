//! Deterministic fixture-backed provider for offline runs.
//!
//! Fixture document: a flat JSON object whose keys are `KIND:key`,
//! `KIND:*` (per-kind default) or `*` (global default). A value is either
//! literal completion text, a JSON object (rendered as a fenced json
//! block), or a list of those indexed by repair attempt; the last entry
//! repeats.

use std::collections::HashMap;
use std::path::Path;

use async_trait::async_trait;
use serde_json::Value;
use thiserror::Error;

use super::{AgentKind, CallUsage, ModelReply, ModelRequest, Provider, ProviderError};

pub(crate) const SCRIPTED_MODEL: &str = "scripted";

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot read fixture file: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fixture root must be a JSON object")]
    NotAnObject,
    #[error("unknown agent kind in fixture key {0:?}")]
    UnknownKind(String),
    #[error("fixture key {0:?} must look like KIND:key")]
    BadKey(String),
    #[error("fixture value for {0:?} must be text, an object, or a list of those")]
    BadValue(String),
    #[error("duplicate fixture key {0:?}")]
    Duplicate(String),
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    exact: HashMap<(AgentKind, String), Vec<String>>,
    per_kind: HashMap<AgentKind, Vec<String>>,
    default: Option<Vec<String>>,
}

fn render(value: &Value, key: &str) -> Result<String, FixtureError> {
    match value {
        Value::String(s) => Ok(s.clone()),
        Value::Object(_) => Ok(format!("```json\n{}\n```", serde_json::to_string_pretty(value)?)),
        _ => Err(FixtureError::BadValue(key.to_string())),
    }
}

fn sequence(value: &Value, key: &str) -> Result<Vec<String>, FixtureError> {
    match value {
        Value::Array(items) if !items.is_empty() => items.iter().map(|v| render(v, key)).collect(),
        Value::Array(_) => Err(FixtureError::BadValue(key.to_string())),
        other => Ok(vec![render(other, key)?]),
    }
}

impl ScriptedProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one response (or a repair sequence) for `(kind, key)`.
    pub fn with(mut self, kind: AgentKind, key: &str, responses: &[&str]) -> Self {
        self.exact.insert(
            (kind, key.to_string()),
            responses.iter().map(|s| s.to_string()).collect(),
        );
        self
    }

    pub fn with_default(mut self, response: &str) -> Self {
        self.default = Some(vec![response.to_string()]);
        self
    }

    pub fn from_json(doc: &Value) -> Result<Self, FixtureError> {
        let obj = doc.as_object().ok_or(FixtureError::NotAnObject)?;
        let mut provider = Self::default();
        for (raw_key, value) in obj {
            let seq = sequence(value, raw_key)?;
            if raw_key == "*" {
                provider.default = Some(seq);
                continue;
            }
            let (kind, key) = raw_key
                .split_once(':')
                .ok_or_else(|| FixtureError::BadKey(raw_key.clone()))?;
            let kind = AgentKind::parse(kind).ok_or_else(|| FixtureError::UnknownKind(raw_key.clone()))?;
            let replaced = if key == "*" {
                provider.per_kind.insert(kind, seq).is_some()
            } else {
                provider.exact.insert((kind, key.to_string()), seq).is_some()
            };
            if replaced {
                return Err(FixtureError::Duplicate(raw_key.clone()));
            }
        }
        Ok(provider)
    }

    pub fn from_file(path: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }

    fn lookup(&self, kind: AgentKind, key: &str) -> Option<&Vec<String>> {
        self.exact
            .get(&(kind, key.to_string()))
            .or_else(|| self.per_kind.get(&kind))
            .or(self.default.as_ref())
    }
}

/// Synthetic token count: one token per four characters, rounded up.
pub(crate) fn synthetic_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[async_trait]
impl Provider for ScriptedProvider {
    async fn complete(&self, request: &ModelRequest) -> Result<ModelReply, ProviderError> {
        let seq = self
            .lookup(request.kind, &request.key)
            .ok_or_else(|| ProviderError::MissingFixture {
                kind: request.kind,
                key: request.key.clone(),
            })?;
        let idx = (request.attempt as usize).min(seq.len() - 1);
        let text = seq[idx].clone();
        Ok(ModelReply {
            usage: CallUsage {
                prompt_tokens: synthetic_tokens(&request.prompt),
                completion_tokens: synthetic_tokens(&text),
                wall_time: std::time::Duration::ZERO,
                model_id: SCRIPTED_MODEL.to_string(),
            },
            text,
        })
    }

    fn model_id(&self) -> &str {
        SCRIPTED_MODEL
    }
}
