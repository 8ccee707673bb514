use std::path::PathBuf;

use diac_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed input at offset {offset}: {reason}")]
    MalformedInput { offset: usize, reason: String },
    #[error("label error at position {position}: class {class} outside 0..15")]
    Label { position: usize, class: usize },
    #[error("post-processing invariant {invariant} violated ({}): {detail}", invariant_name(*.invariant))]
    Invariant { invariant: u8, detail: String },
    #[error("alignment error: base texts diverge at character offset {offset}")]
    Alignment { offset: usize },
    #[error("ingest error: {0}")]
    Ingest(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("config fingerprint mismatch: checkpoint has {found}, expected {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn invariant_name(n: u8) -> &'static str {
    match n {
        1 => "stripping diacritics must recover the input",
        2 => "diacritic count must match predictions",
        3 => "all letter positions must be consumed",
        _ => "unknown invariant",
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status: 1 usage/config, 2 data or validation, 3 numeric or invariant failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Tensor(TensorError::Config(_)) => 1,
            Error::Tensor(_) | Error::Invariant { .. } | Error::NonFiniteGradient(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
