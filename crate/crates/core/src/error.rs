//! One error type for the whole library.
//!
//! Variants separate caller mistakes (shape/contract/config) from runtime
//! failures (state, non-finite values, I/O) so the CLI can report each with a
//! useful one-line message.

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes cannot be combined.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition on an operation's arguments was violated.
    #[error("{0}")]
    Contract(String),

    /// A run configuration is invalid or inconsistent with the data.
    #[error("{0}")]
    Config(String),

    /// An object was used after it was consumed or before it was ready.
    #[error("{0}")]
    State(String),

    /// A numeric quantity that must stay finite became NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Failure reading or writing a file.
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// Failure parsing a textual input (config file, CSV, checkpoint).
    #[error("{0}")]
    Parse(String),
}

impl Error {
    /// Convenience constructor for [`Error::Contract`].
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Convenience constructor for [`Error::Config`].
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Convenience constructor for [`Error::State`].
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    /// Convenience constructor for [`Error::Parse`].
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    /// Wrap an I/O error with the path or action that produced it.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

/// Result alias used throughout the library.
pub type Result<T> = std::result::Result<T, Error>;
