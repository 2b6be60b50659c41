use thiserror::Error;

/// Errors raised anywhere in the stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } | Error::Contract(_) | Error::Json(_) => 2,
            Error::Data(_)
            | Error::Version { .. }
            | Error::Truncated(_)
            | Error::Checksum { .. }
            | Error::Io(_) => 3,
            Error::Numeric(_) | Error::DegenerateBatch(_) => 4,
        }
    }
}
