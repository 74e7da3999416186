use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),

    #[error("group `{group_id}` has {originals} original questions, expected exactly one")]
    MalformedGroup { group_id: String, originals: usize },

    #[error("group `{group_id}` is inconsistent: {reason}")]
    InconsistentGroup { group_id: String, reason: String },

    #[error("unknown sample `{0}`")]
    UnknownSample(String),

    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },

    #[error("samples `{0}` and `{1}` share an answer label; not a negative pair")]
    NotANegative(String, String),

    #[error("pair ({0}, {1}) is not a positive pair")]
    NotAPositive(usize, usize),

    #[error("similarity undefined for a zero vector")]
    ZeroVector,

    #[error("vector {index} is not unit norm (norm = {norm})")]
    NotUnitNorm { index: usize, norm: f64 },

    #[error("empty question text")]
    EmptyText,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(&'static str),

    #[error("curation starved: {0}")]
    StarvedPool(String),

    #[error("negative weights must be non-negative and sum to 1 (got {0:?})")]
    InvalidWeights([f64; 3]),

    #[error("malformed record on line {line}: {reason}")]
    Format { line: usize, reason: String },

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        arg,
        reason: reason.into(),
    }
}
