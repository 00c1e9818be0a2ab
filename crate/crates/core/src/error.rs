use alloc::string::String;

/// Errors produced by the core toolkit.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot render watermark: {0}")]
    Render(String),
    #[error("non-finite {loss} loss during training")]
    Training { loss: String },
    #[error("unknown watermark id `{0}`")]
    UnknownWatermark(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
