use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("logarithm of non-positive value {value} at flat index {index}")]
    NonPositiveLog { index: usize, value: f64 },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("trajectory leaves the frame: {0}")]
    OutOfBounds(String),

    #[error("clip file has bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("clip file has unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("clip file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("clip file dims {0:?} overflow the addressable payload size")]
    DimOverflow([u32; 4]),

    #[error("clip file value {value} at index {index} is outside [0, 1]")]
    PixelRange { index: usize, value: f32 },

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("cannot evaluate on an empty split")]
    EmptySplit,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
