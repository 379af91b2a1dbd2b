use alloc::string::String;

/// Errors raised by the core algorithms.
///
/// The variants follow the failure classes the operations distinguish:
/// configuration problems (bad shapes, invalid hyper-parameters), bad input
/// values, out-of-range tokens, invalid sequence layouts and numerical
/// breakdowns during training.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("mapping error: {0}")]
    Mapping(String),
    #[error("sample {id} has length {len}, exceeding max_seq_len {max}")]
    Oversized { id: usize, len: usize, max: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("context overflow: need {needed} positions, limit {limit}")]
    ContextOverflow { needed: usize, limit: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use input_err;
