use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the netclus core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: zero norm")]
    DegenerateVector,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("label out of range: {label} (num_classes = {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate flow id `{0}`")]
    DuplicateId(String),

    #[error("unknown flow id `{0}` in teacher output")]
    UnknownId(String),

    #[error("missing teacher output for flow `{0}`")]
    MissingTeacher(String),

    #[error("flow `{0}` has neither payload nor features")]
    EmptyFlow(String),

    #[error("flow `{0}` has no label")]
    MissingLabel(String),

    #[error("probabilities for `{id}` sum to {sum}, expected 1")]
    ProbabilitySum { id: String, sum: f64 },

    #[error("empty payload")]
    EmptyPayload,

    #[error("centroid for class {0} is not initialized")]
    UninitializedCentroid(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("training diverged at epoch {epoch}: {what} is not finite")]
    Diverged { epoch: usize, what: &'static str },

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
