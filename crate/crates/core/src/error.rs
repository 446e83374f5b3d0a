use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular support: Gram matrix of the selected atoms is rank deficient (pivot {pivot:.3e})")]
    SingularSupport { pivot: f64 },

    #[error("near-dependent atom: Cholesky pivot {pivot:.3e} is not positive")]
    NearDependence { pivot: f64 },

    #[error("undefined input: {0}")]
    UndefinedInput(String),

    #[error("insufficient data: need {needed} columns, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("no usable images found in {0}")]
    NoImages(PathBuf),

    #[error("image decode error in {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    #[error("checkpoint magic mismatch: expected \"LSRS\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {0:#04x}")]
    BadVersion(u8),

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
