use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by failure class so the CLI can map them onto its
/// documented exit codes: usage errors (2), data validation errors (3) and
/// numerical failures (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data validation error: {0}")]
    Data(String),

    /// Data error tied to a specific line of an input file.
    #[error("{file}:{line}: {msg}")]
    DataAt {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("grid error: {0}")]
    Grid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A forecaster asked the evaluation harness for data beyond the
    /// current forecast origin.
    #[error("leakage: requested day {requested} but data is limited to day {limit}")]
    Leakage { requested: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code for the CLI: 2 usage, 3 data validation, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::DataAt { .. } | Error::Grid(_) | Error::Io(_) => 3,
            Error::Shape(_) | Error::Numerical(_) | Error::Leakage { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
