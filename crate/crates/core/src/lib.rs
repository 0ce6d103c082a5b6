//! Multi-agent validation, remediation and discovery pipeline for
//! web-sourced tabular datasets.

pub mod gateway;
pub mod schema;
pub mod context;
pub mod cache;
pub mod retrieval;
pub mod validators;
pub mod remediation;
pub mod finalization;
pub mod dataset;
pub mod orchestrator;
pub mod evaluation;
