// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {q}-bit weight code {code}: codes must be odd with |code| <= 2^q - 1")]
    InvalidCode { code: i64, q: u32 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt file {}: {reason}", path.display())]
    CorruptFile { path: PathBuf, reason: String },

    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("bad IDX magic {found:#010x} in {} (expected {expected:#010x})", path.display())]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("missing forward cache for the {0} branch")]
    MissingCache(&'static str),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable category, used on CLI stderr and as the basis
    /// for FFI status codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidCode { .. } => "invalid-code",
            Error::Dimension(_) => "dimension",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::CorruptFile { .. } => "corrupt-file",
            Error::Version { .. } => "version",
            Error::BadMagic { .. } => "bad-magic",
            Error::Config(_) => "config",
            Error::Empty(_) => "empty",
            Error::MissingCache(_) => "missing-cache",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Csv(_) => "io",
        }
    }
}
