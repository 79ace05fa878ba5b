use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error")]
    Io(#[from] io::Error),

    #[error("not a vector table")]
    NotVectorTable,

    #[error("not a probe model file")]
    NotModelFile,

    #[error("corrupt table: {0}")]
    CorruptTable(String),

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0:#04x}")]
    UnsupportedDtype(u8),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("undefined similarity: zero vector")]
    UndefinedSimilarity,

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("AUROC undefined: {0}")]
    AurocUndefined(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid trace {trace_id}: {reason}")]
    InvalidTrace { trace_id: String, reason: String },

    #[error("manifest line {line}")]
    Manifest {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("unlabeled chunk {index} in trace {trace_id}")]
    UnlabeledChunk { trace_id: String, index: usize },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("missing vectors: {0}")]
    MissingVectors(String),

    #[error("stream already chopped")]
    StreamChopped,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    /// True for failures of the underlying file or socket, as opposed to bad
    /// input or configuration.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }

    pub(crate) fn invalid_trace(trace_id: &str, reason: impl Into<String>) -> Self {
        Error::InvalidTrace {
            trace_id: trace_id.to_owned(),
            reason: reason.into(),
        }
    }
}
