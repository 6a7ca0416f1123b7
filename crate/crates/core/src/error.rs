use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("no feasible split: no divisor of {h_heads} heads in [{min_dit}, {max_dit}]")]
    NoFeasibleSplit {
        h_heads: u32,
        min_dit: u32,
        max_dit: u32,
    },

    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown action token {0:?}")]
    UnknownAction(String),

    #[error("invalid latent state: {0}")]
    InvalidState(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("equivalence failure: {0}")]
    Equivalence(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a missing or malformed input rather than a
    /// property of the problem instance.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Configuration(_)
                | Error::InvalidConfig(_)
                | Error::Parse { .. }
                | Error::Schema { .. }
                | Error::UnknownAction(_)
                | Error::InvalidState(_)
                | Error::Graph(_)
                | Error::Plan(_)
        )
    }

    /// True for errors meaning the instance has no admissible solution.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::NoFeasibleSplit { .. } | Error::Fit(_))
    }
}
