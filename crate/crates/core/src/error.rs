// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input text is empty")]
    EmptyInput,

    #[error("symbol {symbol:?} at byte {offset} is not in the vocabulary")]
    UnknownSymbol { symbol: String, offset: usize },

    #[error("token id {id} is outside the vocabulary (size {vocab_size})")]
    OutOfVocabulary { id: u32, vocab_size: usize },

    #[error("embedding dimension mismatch: backend expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("backend `{backend}` does not support {capability}")]
    CapabilityUnsupported {
        backend: String,
        capability: &'static str,
    },

    #[error("sampling temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("sample count must be at least 1")]
    InvalidSampleCount,

    #[error("pair has no generated tokens")]
    EmptyGeneration,

    #[error("no noun chunk found in prompt")]
    NoSubjectCandidate,

    #[error("subject {0:?} could not be located in the prompt/generation sequence")]
    SubjectNotLocated(String),

    #[error("subject occurrences at {first} and {second} overlap (window length {len})")]
    OverlappingOccurrences {
        first: usize,
        second: usize,
        len: usize,
    },

    #[error("occurrence window at {start} (length {len}) exceeds sequence length {total}")]
    OccurrenceOutOfBounds {
        start: usize,
        len: usize,
        total: usize,
    },

    #[error("generation has no tokens with a qualifying part-of-speech tag")]
    NoScorableTokens,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("{0} must not be empty")]
    EmptyCollection(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
