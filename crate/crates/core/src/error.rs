use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: wrong IDX magic {found:#010x}, expected {expected:#010x}")]
    WrongMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: header announces {expected} bytes of payload, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("class {0} appears in more than one task")]
    OverlappingClasses(usize),
    #[error("class {class} is not present (dataset has {num_classes} classes)")]
    UnknownClass { class: usize, num_classes: usize },
    #[error("task {0} has no samples")]
    EmptyTask(usize),
    #[error("unknown CIL problem {name:?}; valid names: {valid}")]
    UnknownProblem { name: String, valid: String },
    #[error("component count {0} is not a perfect square")]
    NonSquareK(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid simplex: {0}")]
    InvalidSimplex(String),
    #[error("top-S cutoff {s} outside 1..={len}")]
    SOutOfRange { s: usize, len: usize },
    #[error("index {index} out of range for {len} components")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid mixing ratio {0}")]
    InvalidRatio(f64),
    #[error("scholar has already been initially fit")]
    SecondInitialFit,
    #[error("scholar has not been initially fit")]
    NotInitialized,
    #[error("a stream needs at least 2 tasks, got {0}")]
    TooFewTasks(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("stage {stage} out of range 1..={tasks}")]
    StageOutOfRange { stage: usize, tasks: usize },
    #[error("incomplete run record: {0}")]
    IncompleteRecord(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("accuracy {0} outside [0, 1]")]
    AccuracyOutOfRange(f64),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
