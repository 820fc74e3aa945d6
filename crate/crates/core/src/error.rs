use std::io;
use std::path::PathBuf;

use crate::graph::ValidationError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("invalid stream header in {path}: {reason}")]
    StreamHeader { path: PathBuf, reason: String },

    #[error("invalid block configuration: {0}")]
    BlockConfig(String),

    #[error("end of stream")]
    EndOfStream,

    #[error("beginning of stream")]
    BeginningOfStream,

    #[error("stream is not open for {0}")]
    StreamMode(&'static str),

    #[error("item has {got} bytes, stream items are {expected} bytes")]
    ItemSize { expected: usize, got: usize },

    #[error("insufficient memory: minimum requests total {required} bytes but only {available} available (short by {shortfall})")]
    InsufficientMemory {
        required: u64,
        available: u64,
        shortfall: u64,
    },

    #[error("memory budget exceeded: requested {requested} bytes with {remaining} remaining")]
    BudgetExceeded { requested: u64, remaining: u64 },

    #[error("invalid memory request: {0}")]
    MemoryRequest(String),

    #[error("metadata key {key:?} is not visible at node {node}")]
    MissingMetadata { key: String, node: String },

    #[error("metadata key {key:?} holds {found}, fetched as {expected}")]
    MetadataType {
        key: String,
        expected: &'static str,
        found: &'static str,
    },

    #[error("contract violation in {node}: {message}")]
    ContractViolation { node: String, message: String },

    #[error("lifecycle error in {node}: {message}")]
    Lifecycle { node: String, message: String },

    #[error("invalid flow graph: {0}")]
    Validation(#[from] ValidationError),

    #[error("phase {phase} failed at {node}: {source}")]
    Phase {
        phase: usize,
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parallel worker panicked")]
    WorkerPanic,

    #[error("execution time database {path}, line {line}: {message}")]
    TimeDb {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("transform maps output cell ({x}, {y}) to ({src_x}, {src_y}), outside the {width}x{height} input")]
    OutOfBounds {
        x: u64,
        y: u64,
        src_x: i64,
        src_y: i64,
        width: u64,
        height: u64,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn contract(node: &str, message: impl Into<String>) -> Self {
        Error::ContractViolation {
            node: node.to_owned(),
            message: message.into(),
        }
    }

    /// Strips `Phase` wrappers.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root_cause(),
            other => other,
        }
    }

    /// True for errors caused by bad input or configuration rather than the
    /// storage layer.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self.root_cause(),
            Error::Io(_) | Error::StreamHeader { .. } | Error::TimeDb { .. } | Error::WorkerPanic
        )
    }
}
