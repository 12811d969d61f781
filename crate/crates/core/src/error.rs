use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A caller broke an operation's precondition (e.g. supplied a mask bit
    /// for a FIXED slot).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("growth cap {cap} unattainable: fixed weights alone occupy ratio {fixed_ratio:.6}")]
    CapUnattainable { cap: f64, fixed_ratio: f64 },

    #[error("layer {layer}: no ungrown slot left (capacity {capacity} exhausted)")]
    CapacityExhausted { layer: usize, capacity: usize },

    #[error("enumeration budget exceeded: {configs} configurations > budget {budget}")]
    BudgetExceeded { configs: u128, budget: u128 },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing snapshot for task {0}")]
    MissingSnapshot(u32),

    #[error("task {task}: {source}")]
    Task {
        task: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a task id to an error bubbling out of a per-task operation.
    pub fn in_task(self, task: u32) -> Self {
        match self {
            e @ Error::Task { .. } => e,
            e => Error::Task {
                task,
                source: Box::new(e),
            },
        }
    }

    /// True when the error (or its task-wrapped cause) is an invariant failure
    /// rather than bad input.
    pub fn is_invariant_failure(&self) -> bool {
        match self {
            Error::Invariant(_) | Error::CapUnattainable { .. } => true,
            Error::Task { source, .. } => source.is_invariant_failure(),
            _ => false,
        }
    }
}
