use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum BnnError {
    /// Invalid shapes, option values or layer configurations.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent dataset contents.
    #[error("data error: {0}")]
    Data(String),

    /// A model or dataset file violates its binary layout.
    #[error("format error: {field} at byte {offset}: {reason}")]
    Format {
        field: String,
        offset: usize,
        reason: String,
    },

    /// A caller broke an operation's documented precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Training produced a NaN or infinite value.
    #[error("non-finite value during training: epoch {epoch}, batch {batch}, layer {layer}: {what}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        layer: usize,
        what: String,
    },

    /// Inconsistent internal state, e.g. a trace that does not belong to a network.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl BnnError {
    pub(crate) fn format(field: impl Into<String>, offset: usize, reason: impl Into<String>) -> Self {
        BnnError::Format {
            field: field.into(),
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, BnnError>;
