use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::TensorError::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
