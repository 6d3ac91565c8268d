use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite: pivot {pivot} (original index {index}) is {value}")]
    NotPositiveDefinite { pivot: usize, index: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid effect specification: {0}")]
    InvalidEffect(String),

    #[error("invalid hyperparameter value: {0}")]
    InvalidHyper(String),

    #[error("configuration error at {location}: {message}")]
    Config { location: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("likelihood domain error: {0}")]
    Domain(String),

    #[error("Newton iteration diverged: {0}")]
    Divergence(String),

    #[error("hyperparameter search failed: {0}")]
    HyperSearch(String),

    #[error("invalid Gaussian input: {0}")]
    InvalidGaussian(String),

    #[error("combined precision is not positive definite (smallest eigenvalue estimate {min_eigenvalue:.3e}); the prior dominates the pooled information")]
    PriorDominance { min_eigenvalue: f64 },

    #[error("ratio approximation invalid: {0}")]
    RatioApprox(String),

    #[error("too few usable node pairs for alpha pooling: {usable} (need at least 3)")]
    TooFewNodes { usable: usize },

    #[error("block fit failed at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("result file error: {0}")]
    Results(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// I/O error that names the file involved.
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub fn config(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { location: location.into(), message: message.into() }
    }

    /// True for errors caused by malformed user input (configs, tables, plans).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Data(_) | Error::Partition(_) | Error::InvalidEffect(_)
        ) || matches!(self, Error::Step { source, .. } if source.is_config())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
