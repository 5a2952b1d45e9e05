use std::path::PathBuf;

use thiserror::Error;

/// Every failure the simulator can surface.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, counts or settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation invoked in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// Power control met an all-zero transmit vector.
    #[error("degenerate input: all-zero transmit signal for batch rows {rows:?}")]
    DegenerateInput { rows: Vec<usize> },

    /// A non-finite value appeared during a forward pass or update.
    #[error("non-finite value at stage `{stage}`")]
    NonFinite { stage: String },

    /// Training produced a NaN loss; the model was rolled back to the last good epoch.
    #[error("training diverged at epoch {epoch}; restored parameters from epoch {restored_from}")]
    Diverged { epoch: usize, restored_from: usize },

    /// A file had the wrong shape or content.
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
