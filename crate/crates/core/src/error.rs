use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected \"FLSHHD01\", found {found:?}")]
    BadMagic { found: [u8; 8] },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("{extra} trailing bytes after declared payload")]
    TrailingBytes { extra: u64 },

    #[error("non-finite value in row {row}")]
    NonFiniteValue { row: usize },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),

    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),

    #[error("invalid options: {0}")]
    InvalidOptions(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid quantization group: {0}")]
    InvalidGroup(String),

    #[error("{subsets} probe subsets exceed the enumeration guard of {limit}")]
    TooManySubsets { subsets: u128, limit: u128 },

    #[error("estimate has no non-zero entry")]
    AllZero,

    #[error("token {token} has zero probability")]
    ZeroProbability { token: usize },

    #[error("index invariant violated: {0}")]
    Invariant(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
