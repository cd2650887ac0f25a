use thiserror::Error;

/// Errors raised by the sampler, its communicator and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("collective contract violation: {0}")]
    Collective(String),

    #[error("rank {rank} lost its peer {peer} (worker exited early)")]
    Disconnected { rank: usize, peer: usize },

    #[error("worker {rank} failed: {source}")]
    Worker {
        rank: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("worker {rank} panicked: {message}")]
    WorkerPanic { rank: usize, message: String },

    #[error("malformed payload: {0}")]
    Payload(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate weights: {0}")]
    Degenerate(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("iteration {k}: {source}")]
    Iteration {
        k: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub(crate) fn at_iteration(self, k: usize) -> Self {
        match self {
            e @ Error::Iteration { .. } => e,
            e => Error::Iteration {
                k,
                source: Box::new(e),
            },
        }
    }

    /// Strips `Worker`/`Iteration` wrappers and returns the innermost error.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::Worker { source, .. } | Error::Iteration { source, .. } => source.root_cause(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
