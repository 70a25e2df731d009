use std::path::PathBuf;

use crate::config::Diagnostic;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {lhs:?} vs {rhs:?} ({context})")]
    DimensionMismatch {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        context: &'static str,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("k = {k} out of range for {num_experts} experts")]
    KOutOfRange { k: usize, num_experts: usize },

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    TokenOutOfVocab { id: u32, vocab_size: usize },

    #[error("operation requires {expected} model, got {actual}")]
    ModeMismatch {
        expected: &'static str,
        actual: String,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("checkpoint invariant violated: {0}")]
    InvariantViolation(String),

    #[error("shared parameter {name} has mismatched shapes {shapes:?}")]
    ShapeMismatch {
        name: String,
        shapes: Vec<Vec<usize>>,
    },

    #[error("invalid configuration: {}", format_diagnostics(.0))]
    Config(Vec<Diagnostic>),

    #[error("missing expert {name}: {reason}")]
    MissingExpert { name: String, reason: String },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("invalid filter: {0}")]
    InvalidFilter(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
