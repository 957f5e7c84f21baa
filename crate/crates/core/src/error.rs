use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("rank {rank} too large for layer {layer} ({d_out}x{d_in})")]
    RankTooLarge {
        layer: String,
        rank: usize,
        d_out: usize,
        d_in: usize,
    },

    #[error("layer {0} is not in the adapter set")]
    UnknownLayer(String),

    #[error("invalid fusion spec: {0}")]
    InvalidFusion(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unexpected EOF while reading {0}")]
    UnexpectedEof(String),

    #[error("unsupported file version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("missing adapters for classes {0:?}")]
    MissingAdapters(Vec<usize>),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(
        "oracle test accuracy {accuracy:.4} is below the required {required:.2}; \
         increase epochs or training images"
    )]
    OracleTooWeak { accuracy: f64, required: f64 },

    #[error("symmetric eigendecomposition did not converge")]
    EigenNoConvergence,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            layer: layer.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
