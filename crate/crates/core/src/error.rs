use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The CLI maps each variant onto one of its documented exit codes via
/// [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate vector: norm {norm:e} is below {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad magic bytes {0:?}, expected \"FBNK\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unexpected section tag {found}, expected {expected}")]
    WrongSection { expected: u8, found: u8 },

    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("invalid feature bank: {0}")]
    InvalidBank(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("infeasible OOD margin {margin}: no prototype placed after {attempts} attempts")]
    InfeasibleMargin { margin: f64, attempts: usize },

    #[error("property violation: {0}")]
    Property(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse classification of [`Error`], used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Format,
    Config,
    Numeric,
    Property,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) => ErrorKind::Io,
            Error::BadMagic(_)
            | Error::UnsupportedVersion(_)
            | Error::WrongSection { .. }
            | Error::Truncated { .. }
            | Error::InvalidBank(_) => ErrorKind::Format,
            Error::Config { .. } | Error::InfeasibleMargin { .. } => ErrorKind::Config,
            Error::DimensionMismatch { .. } => ErrorKind::Config,
            Error::Contract(_)
            | Error::DegenerateVector { .. }
            | Error::Empty(_)
            | Error::NonFinite(_) => ErrorKind::Numeric,
            Error::Property(_) => ErrorKind::Property,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
