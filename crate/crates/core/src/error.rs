use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// A caller broke a precondition (bad shapes, bad parameters).
    Usage,
    /// Input data could not be read or is unusable.
    Data,
    /// A numerical procedure failed (rank loss, divergence, training blow-up).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },

    #[error("experiment {index} failed: {source}")]
    Experiment {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{what} is singular (condition estimate {condition:.3e})")]
    Singular { what: &'static str, condition: f64 },

    #[error("rank deficient: numerical rank {rank}, need {required}; increase the experiment count or change the seed")]
    RankDeficient { rank: usize, required: usize },

    #[error("Markov sequence depth {available} is too short, need depth {required}")]
    InsufficientDepth { required: usize, available: usize },

    #[error("degenerate system: {0}")]
    Degenerate(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("training failed at epoch {epoch}: loss became non-finite")]
    TrainingFailed { epoch: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Dimension(_) | Error::Contract(_) => Category::Usage,
            Error::NonFinite(_)
            | Error::DegenerateSignal(_)
            | Error::Parse { .. }
            | Error::Format(_)
            | Error::Io(_) => Category::Data,
            Error::Divergence { .. }
            | Error::Singular { .. }
            | Error::RankDeficient { .. }
            | Error::InsufficientDepth { .. }
            | Error::Degenerate(_)
            | Error::TrainingFailed { .. } => Category::Numerical,
            Error::Experiment { source, .. } => source.category(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Format(err.to_string())
    }
}
