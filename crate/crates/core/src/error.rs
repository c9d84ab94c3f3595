use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the estimation library and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An input fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A supplied search direction does not decrease the objective.
    #[error("not a descent direction (directional derivative {0:e})")]
    NotDescent(f64),

    /// The Fisher information matrix could not be inverted.
    #[error("singular Fisher information: {0}")]
    SingularFisher(String),

    /// A requested fine grid exceeds the configured cell budget.
    #[error("fine grid of {cells} cells exceeds the budget of {budget}")]
    GridTooLarge { cells: usize, budget: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
