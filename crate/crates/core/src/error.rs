use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, got {got:?} and {other:?}")]
    Dimension { op: &'static str, got: Vec<usize>, other: Vec<usize> },

    #[error("{op}: incompatible extents on axis {axis} ({lhs} vs {rhs})")]
    Broadcast { op: &'static str, axis: usize, lhs: usize, rhs: usize },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on a value that is not tracked by the graph")]
    Untracked,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("all pixels are ignored; nothing to average over")]
    EmptyBatch,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at iteration {iter}: {cause}")]
    Diverged { iter: usize, cause: String },

    #[error("not a checkpoint (bad magic)")]
    NotACheckpoint,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    CheckpointTruncated(&'static str),

    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("unknown tensor `{0}` in checkpoint")]
    UnknownTensor(String),

    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    TensorShape { name: String, found: Vec<usize>, expected: Vec<usize> },

    #[error("checkpoint stores {found:?} tensors but the model uses {expected:?}")]
    DTypeMismatch { found: crate::DType, expected: crate::DType },

    #[error("prediction label {label} is outside [0, {classes})")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("no class has a non-empty union; mIoU is undefined")]
    EmptyUnion,

    #[error("unsupported bit depth {0}")]
    UnsupportedBitDepth(u32),

    #[error("image format error: {0}")]
    ImageFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn dims(op: &'static str, got: &[usize], other: &[usize]) -> Self {
        Error::Dimension { op, got: got.to_vec(), other: other.to_vec() }
    }
}
