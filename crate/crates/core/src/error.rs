use thiserror::Error;

/// Errors surfaced by graph construction, masking, training and IO.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A layer id was referenced that the graph does not contain.
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    /// A mask is malformed for the layer it targets.
    #[error("invalid mask for `{layer}`: {reason}")]
    InvalidMask { layer: String, reason: String },

    /// Configuration values are out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A checkpoint directory is missing, corrupt or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Label mapping could not be built (e.g. more target classes than
    /// source classes).
    #[error("label mapping error: {0}")]
    LabelMap(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step} (loss {loss})")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    /// A dataset could not be located or decoded.
    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
