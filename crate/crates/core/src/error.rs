use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty codebook")]
    EmptyCodebook,

    #[error("codebook version mismatch: message carries {message}, local codebook is {local}")]
    CodebookVersion { message: u32, local: u32 },

    #[error("code index {index} out of range for codebook of size {size}")]
    IndexOutOfRange { index: u32, size: usize },

    #[error("cell ({row}, {col}) outside {height}x{width} grid")]
    CellOutOfGrid {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("association matrix is not one-to-one")]
    Association,

    #[error("empty ground truth")]
    EmptyGroundTruth,

    #[error("malformed wire data: {0}")]
    Wire(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl ToString, actual: impl ToString) -> Error {
    Error::Shape {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
