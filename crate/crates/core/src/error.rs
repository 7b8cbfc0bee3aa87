//! Shared error type for all core operations.

use alloc::string::String;

/// Errors surfaced by tensor math, data generation, models, debiasing and
/// evaluation. Variants carry enough context to name the offending tensor,
/// token or field.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error on `{name}`: expected {expected}, got {got}")]
    Shape {
        name: String,
        expected: String,
        got: String,
    },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("undefined similarity: zero vector")]
    ZeroVector,
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("tagging error: {0}")]
    Tagging(String),
    #[error("empty data: {0}")]
    EmptyData(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

pub type Result<T> = core::result::Result<T, Error>;
