use std::fmt;

/// Crate-wide error type. The CLI maps these onto exit codes:
/// config errors exit 2, data/IO errors exit 3, numeric failures exit 4.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shape disagreement; carries both shapes.
    Shape(String),
    /// Invalid configuration (bad field, unknown key, incompatible variant).
    Config(String),
    /// Missing or malformed input data (corpus, checkpoint, manifest).
    Data(String),
    /// Non-finite loss or gradient, or a failed numeric contract.
    Numeric(String),
}

impl Error {
    pub fn shape_mismatch(op: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
