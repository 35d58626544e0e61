// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by the numeric substrate, the model, steering, profiling,
/// decoding and evaluation layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A probability row had no finite entry to normalize over.
    #[error("empty support")]
    EmptySupport,

    /// A row contained NaN or positive infinity.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Every fused entry was masked by truncation.
    #[error("empty support after truncation")]
    EmptyAfterTruncation,

    /// A probability vector failed its normalization check.
    #[error("distribution not normalized (sum = {0})")]
    NotNormalized(f64),

    /// A probability vector contained a negative entry.
    #[error("negative probability {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },

    /// A count or index argument was out of its valid range.
    #[error("{what}: {value} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    /// Two inputs that must agree in shape did not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration value violated its typed range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// The sequence would exceed `max_seq`.
    #[error("sequence overflow: {len} positions exceed max_seq {max_seq}")]
    SequenceOverflow { len: usize, max_seq: usize },

    /// A required input set was empty.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A head-profile artifact is required but absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// A file did not follow the expected binary or JSON layout.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
