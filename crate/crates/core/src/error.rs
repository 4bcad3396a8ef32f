use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("point is behind the camera (z = {z:.3e})")]
    BehindCamera { z: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch in {what}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        what: String,
        stored: u32,
        computed: u32,
    },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
