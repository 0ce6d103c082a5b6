use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::CallUsage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRates {
    pub input_cost_per_1k: Decimal,
    pub output_cost_per_1k: Decimal,
}

/// Model id → per-1k-token rates. Loaded from a TOML file:
///
/// ```toml
/// [models.gpt-4o-mini]
/// input_cost_per_1k = "0.00015"
/// output_cost_per_1k = "0.0006"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricingTable {
    #[serde(default)]
    pub models: BTreeMap<String, ModelRates>,
}

#[derive(Debug, thiserror::Error)]
pub enum PricingError {
    #[error("cannot read pricing file: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid pricing file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("negative rate for model {0:?}")]
    Negative(String),
}

impl PricingTable {
    pub fn with(mut self, model: &str, input_per_1k: Decimal, output_per_1k: Decimal) -> Self {
        self.models.insert(
            model.to_string(),
            ModelRates {
                input_cost_per_1k: input_per_1k,
                output_cost_per_1k: output_per_1k,
            },
        );
        self
    }

    pub fn parse(text: &str) -> Result<Self, PricingError> {
        let table: PricingTable = toml::from_str(text)?;
        for (model, rates) in &table.models {
            if rates.input_cost_per_1k.is_sign_negative() || rates.output_cost_per_1k.is_sign_negative() {
                return Err(PricingError::Negative(model.clone()));
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, PricingError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub total: Decimal,
    /// Models seen in the usage list but absent from the table (costed at 0).
    pub unpriced_models: BTreeSet<String>,
}

/// Exact decimal cost of a list of calls.
pub fn estimate_cost<'a>(usages: impl IntoIterator<Item = &'a CallUsage>, pricing: &PricingTable) -> CostEstimate {
    let thousand = Decimal::from(1000);
    let mut est = CostEstimate::default();
    for u in usages {
        match pricing.models.get(&u.model_id) {
            Some(r) => {
                est.total += Decimal::from(u.prompt_tokens) / thousand * r.input_cost_per_1k
                    + Decimal::from(u.completion_tokens) / thousand * r.output_cost_per_1k;
            }
            None => {
                est.unpriced_models.insert(u.model_id.clone());
            }
        }
    }
    est.total = est.total.normalize();
    est
}
