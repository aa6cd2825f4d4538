use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by which stage of the pipeline raised them so the
/// CLI can map them onto its exit-code contract (usage = 1, data = 2,
/// numeric = 3).
#[derive(Debug, Error)]
pub enum Error {
    /// DDL syntax error with 1-based source position.
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },

    /// Schema-level validation failure (duplicate names, bad FK targets, cycles).
    #[error("schema error: {0}")]
    Schema(String),

    /// Model configuration problem (unknown references, invalid hyperpriors).
    #[error("config error: {0}")]
    Config(String),

    /// Data ingestion failure (header mismatch, unparseable cell, key errors).
    #[error("data error: {0}")]
    Data(String),

    /// Model construction failure (cap exceeded, dimension mismatch).
    #[error("model error: {0}")]
    Model(String),

    /// Query resolution failure (bad references, cycles among records).
    #[error("query error: {0}")]
    Query(String),

    /// Numeric failure during inference or evaluation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code this error maps to: 2 for data/input problems,
    /// 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
