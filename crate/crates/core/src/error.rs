use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite vector")]
    NonFinite,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: truncated IDX header", path.display())]
    TruncatedHeader { path: PathBuf },

    #[error("{}: truncated IDX payload (expected {expected} bytes, found {found})", path.display())]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{}: bad IDX magic {found:#010x}, expected {expected:#010x}", path.display())]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("count mismatch: {images} images in {}, {labels} labels in {}", images_path.display(), labels_path.display())]
    CountMismatch {
        images_path: PathBuf,
        labels_path: PathBuf,
        images: usize,
        labels: usize,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Csv {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("infeasible partition: label {label} has {available} examples but {required} are needed")]
    InfeasiblePartition {
        label: usize,
        available: usize,
        required: usize,
    },

    #[error("label perturbation disallowed")]
    LabelPerturbationDisallowed,

    #[error("inner ascent diverged: γ likely ≤ L_zz (gamma = {gamma})")]
    InnerAscentDiverged { gamma: f64 },

    #[error("dual parameter below smoothness threshold: gamma {gamma} <= L_zz {l_zz}")]
    BelowSmoothnessThreshold { gamma: f64, l_zz: f64 },

    #[error("exact solver limited to small instances ({0})")]
    ExactSolverTooLarge(String),

    #[error("confidence/constant mismatch: delta {delta} >= c1 {c1}")]
    ConfidenceMismatch { delta: f64, c1: f64 },

    #[error("degenerate aggregation weights")]
    DegenerateAggregation,

    #[error("round {round}, client {client}: {source}")]
    ClientUpdate {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty example list")]
    EmptyExamples,

    #[error("unsupported checkpoint format version {0}")]
    CheckpointVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
