// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Result alias for this crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building, decoding, steering or reporting.
#[non_exhaustive]
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands disagree on a dimension.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    /// An operation that needs at least one element received none.
    #[error("empty input to {0}")]
    Empty(&'static str),

    /// A configuration value violates its documented constraints.
    #[error("invalid config: {0}")]
    Config(String),

    /// The KV cache would grow past `max_seq`.
    #[error("sequence length {requested} exceeds max_seq {max}")]
    SequenceOverflow { requested: usize, max: usize },

    /// Prefill was called without any image embeddings.
    #[error("prompt has no image embeddings")]
    NoImageTokens,

    /// An image index points past the end of the cache.
    #[error("image index {index} outside cache of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// NaN or infinity showed up in a computed quantity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The halfspace constraint cannot be met: zero gradient with a positive violation.
    #[error("infeasible correction: zero gradient with violation {0}")]
    Infeasible(f64),

    /// Binning needs more labeled object tokens than were supplied.
    #[error("too few labeled object tokens: need {needed}, got {got}")]
    TooFewTokens { needed: usize, got: usize },

    /// Binomial interval with zero trials, or successes above trials.
    #[error("invalid binomial counts: {successes} of {trials}")]
    Binomial { successes: u64, trials: u64 },

    /// The monotonic clock cannot resolve the measured interval.
    #[error("timer resolution too coarse: {0}")]
    TimerResolution(String),

    /// Filesystem failure, with the path that caused it.
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON document (model, run config).
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// `1` config, `2` numeric, `3` I/O.
    #[must_use]
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Json(_) => 1,
            Self::Io { .. } => 3,
            _ => 2,
        }
    }
}
