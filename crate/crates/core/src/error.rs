use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("selector row {row} out of range for {rows} gate rows")]
    RowOutOfRange { row: usize, rows: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("layer `{layer}` is {found}, expected {expected} granularity")]
    Granularity { layer: String, expected: &'static str, found: &'static str },

    #[error("layer `{0}` cannot be wrapped with a weight filter")]
    UnsupportedLayer(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("batch size must be even, got {0}")]
    OddBatch(usize),

    #[error("empty sample set: {0}")]
    Empty(String),

    #[error("probability vector not normalized (sum = {sum})")]
    Unnormalized { sum: f64 },

    #[error("missing retrained oracle for class {0}")]
    MissingOracle(usize),

    #[error("idx: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    IdxBadMagic { expected: u32, found: u32 },

    #[error("idx: truncated {what}: need {needed} bytes, have {available}")]
    IdxTruncated { what: &'static str, needed: usize, available: usize },

    #[error("idx: image count {images} does not match label count {labels}")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint: unsupported format version {found} (supported: {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint: tensor `{name}` at offset {offset} overflows blob of {blob_len} bytes")]
    CheckpointOffset { name: String, offset: usize, blob_len: usize },

    #[error("checkpoint: blob checksum mismatch")]
    CheckpointChecksum,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Short stable identifier used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::RowOutOfRange { .. } => "row_out_of_range",
            Error::NonScalarLoss { .. } => "non_scalar_loss",
            Error::NonFinite { .. } => "non_finite",
            Error::Granularity { .. } => "granularity",
            Error::UnsupportedLayer(_) => "unsupported_layer",
            Error::UnknownLayer(_) => "unknown_layer",
            Error::OddBatch(_) => "odd_batch",
            Error::Empty(_) => "empty",
            Error::Unnormalized { .. } => "unnormalized",
            Error::MissingOracle(_) => "missing_oracle",
            Error::IdxBadMagic { .. } => "idx_bad_magic",
            Error::IdxTruncated { .. } => "idx_truncated",
            Error::IdxCountMismatch { .. } => "idx_count_mismatch",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::CheckpointOffset { .. } => "checkpoint_offset",
            Error::CheckpointChecksum => "checkpoint_checksum",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
