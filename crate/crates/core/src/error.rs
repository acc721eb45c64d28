use std::path::PathBuf;

use crate::autodiff::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: NodeId, op: &'static str },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("gradient output must be scalar, node {node} has shape {rows}x{cols}")]
    NonScalarOutput { node: NodeId, rows: usize, cols: usize },

    #[error("node {0} is not trainable")]
    NotTrainable(NodeId),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("{what}: schema version {found} is not supported (expected {expected})")]
    Version { what: &'static str, expected: u32, found: u32 },

    #[error("novel pair ({attr}, {obj}) has no instances")]
    EmptyNovelPair { attr: u32, obj: u32 },

    #[error("concept database is empty")]
    EmptyDb,

    #[error("zero-norm key for train instance {0}")]
    ZeroNormKey(usize),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("non-finite outer gradient at outer step {0}")]
    NonFiniteGradient(usize),

    #[error("element concept {0} is absent from the concept database")]
    MissingConcept(u32),

    #[error("support set is empty")]
    EmptySupport,

    #[error("instance has no usable mask slots: {0}")]
    MaskSlots(String),

    #[error("stale artifact {artifact}: expected fingerprint {expected}, found {found}")]
    Fingerprint { artifact: String, expected: String, found: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }
}
