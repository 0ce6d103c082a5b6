use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DEFAULT_URL_COLUMN;
use crate::gateway::{DEFAULT_MAX_REPAIRS, DEFAULT_PAGE_BUDGET_CHARS};

pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    #[default]
    Committee,
    Monolith,
    Rules,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "committee" => Ok(Mode::Committee),
            "monolith" => Ok(Mode::Monolith),
            "rules" => Ok(Mode::Rules),
            other => Err(format!("unknown mode {other:?} (expected committee, monolith or rules)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Committee => "COMMITTEE",
            Mode::Monolith => "MONOLITH",
            Mode::Rules => "RULES",
        })
    }
}

fn on() -> bool {
    true
}

/// Per-agent switches. Disabled stages are bypassed with fail-open defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    #[serde(default = "on")]
    pub relevancy: bool,
    #[serde(default = "on")]
    pub layout: bool,
    #[serde(default = "on")]
    pub source_scrutiny: bool,
    #[serde(default = "on")]
    pub fact_check: bool,
    /// Operational context generation; off means schema-only prompts.
    #[serde(default = "on")]
    pub context: bool,
    /// Negative examples and fallacy illustrations in the context fragments.
    #[serde(default = "on")]
    pub context_examples: bool,
    /// Sample rows shown to the context generator.
    #[serde(default = "on")]
    pub context_learning: bool,
    /// Full fact-check prompt; off uses the minimal variant.
    #[serde(default = "on")]
    pub semantic_audit: bool,
    #[serde(default = "on")]
    pub remediation: bool,
    #[serde(default = "on")]
    pub discovery: bool,
    #[serde(default = "on")]
    pub integrity: bool,
    #[serde(default = "on")]
    pub formatter: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            relevancy: true,
            layout: true,
            source_scrutiny: true,
            fact_check: true,
            context: true,
            context_examples: true,
            context_learning: true,
            semantic_audit: true,
            remediation: true,
            discovery: true,
            integrity: true,
            formatter: true,
        }
    }
}

/// Named ablation presets.
pub const ABLATIONS: &[&str] = &[
    "full",
    "no-fact-check",
    "no-context",
    "no-ctx-examples",
    "rem-only",
    "no-integrity",
    "no-src-scrutiny",
    "no-ctx-learning",
    "no-remediation",
    "no-layout",
    "discovery-only",
    "min-fact-check",
    "no-relevancy",
    "no-formatter",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown ablation {0:?}")]
pub struct UnknownAblation(pub String);

impl Toggles {
    pub fn all_on() -> Self {
        Self::default()
    }

    pub fn all_off() -> Self {
        Self {
            relevancy: false,
            layout: false,
            source_scrutiny: false,
            fact_check: false,
            context: false,
            context_examples: false,
            context_learning: false,
            semantic_audit: false,
            remediation: false,
            discovery: false,
            integrity: false,
            formatter: false,
        }
    }

    /// Toggle set for an ablation name (case, spaces and dashes are ignored).
    pub fn ablation(name: &str) -> Result<Self, UnknownAblation> {
        let key: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let mut t = Self::default();
        match key.as_str() {
            "full" | "aic" | "baseline" => {}
            "nofactcheck" => t.fact_check = false,
            "nocontext" => t.context = false,
            "noctxexamples" => t.context_examples = false,
            "remonly" => t.discovery = false,
            "nointegrity" => t.integrity = false,
            "nosrcscrutiny" => t.source_scrutiny = false,
            "noctxlearning" => t.context_learning = false,
            "noremediation" | "discoveryonly" => t.remediation = false,
            "nolayout" => t.layout = false,
            "minfactcheck" => t.semantic_audit = false,
            "norelevancy" => t.relevancy = false,
            "noformatter" => t.formatter = false,
            _ => return Err(UnknownAblation(name.to_string())),
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// OpenAI-compatible chat completions endpoint.
    #[default]
    Openai,
    /// Fixture-backed deterministic provider.
    Scripted,
}

/// Model provider settings. Never carries the credential itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderSettings {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Environment variable holding the credential.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_env: Option<String>,
    /// Scripted fixture file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Openai,
            model: None,
            endpoint: None,
            credential_env: None,
            fixture: None,
        }
    }
}

fn default_url_column() -> String {
    DEFAULT_URL_COLUMN.to_string()
}

fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}

fn default_page_budget() -> usize {
    DEFAULT_PAGE_BUDGET_CHARS
}

fn default_max_repairs() -> u32 {
    DEFAULT_MAX_REPAIRS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Optional display name (used in comparison reports).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Comma-separated `name[:type]` list.
    pub schema: String,
    pub description: String,
    #[serde(default = "default_url_column")]
    pub url_column: String,
    #[serde(default)]
    pub provider: ProviderSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub toggles: Toggles,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_page_budget")]
    pub page_budget: usize,
    #[serde(default = "default_max_repairs")]
    pub max_repairs: u32,
    /// Rule pack for RULES mode; the built-in generic pack when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rulepack: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(schema: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            label: None,
            schema: schema.into(),
            description: description.into(),
            url_column: default_url_column(),
            provider: ProviderSettings::default(),
            seed: 0,
            parallelism: DEFAULT_PARALLELISM,
            toggles: Toggles::default(),
            mode: Mode::Committee,
            page_budget: DEFAULT_PAGE_BUDGET_CHARS,
            max_repairs: DEFAULT_MAX_REPAIRS,
            rulepack: None,
        }
    }

    pub fn display_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.mode.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_document_defaults() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"schema": "event_type,date", "description": "disasters", "toggles": {"remediation": false}}"#,
        )
        .unwrap();
        assert_eq!(cfg.parallelism, 4);
        assert_eq!(cfg.url_column, "source_url");
        assert_eq!(cfg.mode, Mode::Committee);
        assert!(!cfg.toggles.remediation);
        assert!(cfg.toggles.relevancy && cfg.toggles.formatter);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_named_ablation_resolves() {
        for name in ABLATIONS {
            Toggles::ablation(name).unwrap();
        }
        assert!(!Toggles::ablation("No Remediation").unwrap().remediation);
        assert!(Toggles::ablation("No Remediation").unwrap().discovery);
        assert!(!Toggles::ablation("Rem-Only").unwrap().discovery);
        assert!(!Toggles::ablation("Min FactCheck").unwrap().semantic_audit);
        assert!(!Toggles::ablation("No CtxLearning").unwrap().context_learning);
        assert!(Toggles::ablation("No Magic").is_err());
        let off = Toggles::ablation("full").unwrap();
        assert_eq!(off, Toggles::all_on());
    }

    #[test]
    fn modes_parse() {
        assert_eq!("rules".parse::<Mode>(), Ok(Mode::Rules));
        assert_eq!("MONOLITH".parse::<Mode>(), Ok(Mode::Monolith));
        assert!("hybrid".parse::<Mode>().is_err());
    }
}
