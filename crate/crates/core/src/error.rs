use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {0}: need at least 3 coordinates")]
    InvalidDimension(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("invalid sparsity {sparsity} for dimension {dim}")]
    InvalidSparsity { sparsity: usize, dim: usize },

    #[error("invalid label {0}: logistic samples need y in {{-1, +1}}")]
    InvalidLabel(f64),

    #[error("finite-pool oracle has an empty pool")]
    EmptyPool,

    #[error("effective RSC constant {0} is not positive (gamma - 16 s tau <= 0)")]
    InfeasibleSparsity(f64),

    #[error("budget too small: kappa_T argument {0} is not above 1")]
    BudgetTooSmall(f64),

    #[error("support set is empty")]
    InvalidSupport,

    #[error("not enough data to fit a rate: {0}")]
    NotEnoughData(String),

    #[error("trace grids do not align: {0}")]
    Alignment(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid experiment spec: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse failure classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Runtime,
    Io,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Validation(_)
            | Error::InvalidParameter(_)
            | Error::InvalidDimension(_)
            | Error::InvalidSparsity { .. }
            | Error::Parse(_) => ErrorClass::Validation,
            Error::Csv(e) if !e.is_io_error() => ErrorClass::Validation,
            Error::Io { .. } | Error::Csv(_) => ErrorClass::Io,
            _ => ErrorClass::Runtime,
        }
    }

    /// 0 is success; 1 validation, 2 runtime/oracle, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Validation => 1,
            ErrorClass::Runtime => 2,
            ErrorClass::Io => 3,
        }
    }
}
