// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),

    #[error("skeleton is not a topologically ordered tree: {0}")]
    InvalidSkeleton(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated input: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Errors caused by inputs, files or configuration rather than by a
    /// numerical failure or a bug.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Shape { .. } | Error::NonFinite { .. } | Error::Diverged { .. } | Error::DegenerateRotation(_)
        )
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
