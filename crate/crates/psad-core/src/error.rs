//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape rules of a graph primitive were violated.
    #[error("{primitive}: shape mismatch: {detail}")]
    Shape { primitive: String, detail: String },

    #[error("log: non-positive input {value} at flat index {index}")]
    LogDomain { value: f64, index: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-deterministic forward pass: fix all RNG seeds before running grad_check")]
    NonDeterministicForward,

    #[error("no gradient for trainable parameter '{name}': it never entered the graph (detached subgraph)")]
    DetachedParam { name: String },

    #[error("unknown parameter '{name}'")]
    UnknownParam { name: String },

    #[error("NaN detected in {context}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Divergence {
        context: String,
        step: Option<usize>,
    },

    #[error("out-of-vocabulary id {id} for {field} (vocabulary size {vocab})")]
    OutOfVocab {
        field: String,
        id: u32,
        vocab: usize,
    },

    #[error("infeasible data config: {0}")]
    InfeasibleConfig(String),

    #[error("{path}:{line}: {detail}")]
    Jsonl {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("session schema: {0}")]
    Schema(String),

    #[error("config: {0}")]
    Config(String),

    #[error("invalid config values:\n{}", violations.join("\n"))]
    ConfigViolations { violations: Vec<String> },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn shape(primitive: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            primitive: primitive.to_string(),
            detail: detail.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
