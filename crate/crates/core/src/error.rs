use std::io;

use thiserror::Error;

/// Errors raised across ingestion, sampling and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("row {row}: {msg}")]
    MalformedRow { row: usize, msg: String },

    #[error("row {row}: expected {expected} values, found {found}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },

    #[error("row {row}: non-finite value in column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {row}: duplicate doc_id {id:?}")]
    DuplicateDocId { row: usize, id: String },

    #[error("line {line}: token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { line: usize, token: u64, vocab_size: usize },

    #[error("empty corpus: no document has a value above the threshold")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("count underflow in {table} at index {index}: state is corrupted")]
    CountUnderflow { table: &'static str, index: usize },

    #[error("reconciliation mismatch: {0}")]
    Reconciliation(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("empty category {0:?}")]
    EmptyCategory(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
