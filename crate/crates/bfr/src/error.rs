use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single-tensor dimension problem (bad axis, odd extent, ...).
    #[error("{0}")]
    Dim(String),

    /// backward() was invoked on a non-scalar tensor.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// Invalid configuration detected at construction or load time.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file; `offset` is the byte position where parsing failed.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// Checkpoint file problems, each variant distinct per the format contract.
    #[error("checkpoint: bad magic bytes")]
    CkptMagic,
    #[error("checkpoint: unsupported format version {0}")]
    CkptVersion(u32),
    #[error("checkpoint: truncated payload ({0})")]
    CkptTruncated(String),
    #[error("checkpoint: checksum mismatch (file is corrupt)")]
    CkptChecksum,
    #[error("checkpoint: tensor `{name}` has shape {found:?}, expected {expected:?}")]
    CkptShapeConflict {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint: missing tensor `{0}`")]
    CkptMissingTensor(String),

    /// A loss became non-finite during training; names the first bad component.
    #[error("non-finite loss component `{0}` at step {1}")]
    NonFiniteLoss(String, u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Image(String),
}

pub type Result<V> = std::result::Result<V, Error>;

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
