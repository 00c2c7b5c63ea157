use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or volume shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A label volume contains a value outside the legal set {0, 1, 2, 4}.
    #[error("bad label value {0} (legal values are 0, 1, 2, 4)")]
    BadLabel(u8),

    /// A case has no nonzero voxels, so no bounding box can be computed.
    #[error("empty case: no nonzero voxels in any modality")]
    EmptyCase,

    /// A case id appears more than once in a dataset.
    #[error("duplicate case id: {0}")]
    DuplicateId(String),

    /// A configuration value violates its documented constraints.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint does not match the model it is being loaded into.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    /// A file failed structural validation (bad magic, truncated payload, ...).
    #[error("bad file format in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
