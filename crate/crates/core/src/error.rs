use alloc::string::String;

/// Errors produced by the editing core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("index {index} out of range for extent {extent}")]
    OutOfBounds { index: usize, extent: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("assembly failed: {0}")]
    Assembly(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schedule inconsistency at step {step}: {reason}")]
    Schedule { step: usize, reason: String },
    #[error("noise extraction at step {step} needs sigma > 0 (DDIM has no extractable noise)")]
    ZeroSigma { step: usize },
    #[error("linear algebra: {0}")]
    LinAlg(String),
    #[error("attention cache miss at step {step}, layer {layer}, frame {frame}")]
    CacheMiss {
        step: usize,
        layer: u16,
        frame: usize,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, shape_err};
