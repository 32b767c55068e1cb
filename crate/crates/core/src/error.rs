use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate representation matrix")]
    DegenerateRepresentation,
    #[error("degenerate subset batch: gradient norm is zero")]
    DegenerateSubset,
    #[error("zero-norm gradient passed to HFC")]
    ZeroGradient,
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("basis is not orthonormal: {0}")]
    NotOrthonormal(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} not allowed by the head mask")]
    LabelMasked { label: usize },
    #[error("task {0} is already assigned to a prompt set")]
    DuplicateTask(u32),
    #[error("unknown prompt set {0}")]
    UnknownSet(usize),
    #[error("prompt pool is empty")]
    EmptyPool,
    #[error("task {got} arrived out of order (expected {expected})")]
    OutOfOrder { expected: u32, got: u32 },
    #[error("class {0} overlaps with an earlier task")]
    ClassOverlap(usize),
    #[error("accuracy matrix incomplete: {0}")]
    IncompleteMatrix(String),
    #[error("forgetting needs at least two tasks")]
    TooFewTasks,
    #[error("retrieval counters are empty for task {0}")]
    ZeroRetrievals(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed trace row {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
