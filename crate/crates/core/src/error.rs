//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by corpus IO, configuration validation, and the numeric
/// pipeline. Each variant maps to a distinct CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum or length mismatch in {0}")]
    Checksum(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: u32, vocab: u32 },

    #[error("batch too small: {0} sentence(s), clustering needs at least 2")]
    BatchTooSmall(usize),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("all rows masked in {0}")]
    AllMasked(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable process exit code for the CLI. 0 is success, 2 is reserved for
    /// argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::Config(_) | Error::EmptySplit(_) => 4,
            Error::VersionMismatch { .. } | Error::Checksum(_) => 5,
            Error::Shape(_) | Error::OutOfVocab { .. } | Error::AllMasked(_) => 6,
            Error::BatchTooSmall(_) => 7,
            Error::ZeroNorm(_) | Error::NonFinite(_) => 8,
        }
    }
}
