//! Two-stage capsule-network triage of volumetric CT scans into COVID-19,
//! community-acquired pneumonia and normal, with confidence-gated
//! self-training on unlabeled shifted test sets and the evaluation
//! statistics used to report it.

pub mod capsule;
pub mod data;
pub mod enhancement;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod pipeline;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
