use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("descriptor must be {expected} bytes, got {actual}")]
    DescriptorLength { expected: usize, actual: usize },

    #[error("images must be inserted in order: expected image {expected}, got {actual}")]
    NonSequentialImage { expected: usize, actual: usize },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("ground truth line {line}: {message}")]
    GroundTruth { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parse failures of the binary descriptor file. Each names the byte offset
/// at which the problem was found.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected \"MILD\", found {found:?}")]
    BadMagic { offset: u64, found: [u8; 4] },

    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: u64, version: u32 },

    #[error("descriptor size {value} at offset {offset}; only 32-byte descriptors are supported")]
    DescriptorBytes { offset: u64, value: u32 },

    #[error("file truncated at offset {offset} while reading {what}")]
    Truncated { offset: u64, what: &'static str },

    #[error("{extra} trailing bytes after offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
}
