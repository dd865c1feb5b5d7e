use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite intermediate in {0}")]
    Overflow(&'static str),

    #[error("batch norm in training mode needs more than one value per channel")]
    DegenerateVariance,

    #[error("loss must be a scalar tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("missing mask for image {0}")]
    MissingMask(PathBuf),

    #[error("empty mask: hd95 is undefined when either mask has no foreground")]
    EmptyMask,

    #[error("degenerate ERF: gradient field is identically zero")]
    DegenerateErf,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint incompatible with model: {0}")]
    Incompatible(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (parameter L2 norm {param_norm:.6e})"
    )]
    NumericalAbort {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
