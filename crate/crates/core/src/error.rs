use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data does not satisfy a type invariant (normalization, ranges, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A hyperparameter combination is invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error("vocabulary size mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    /// Argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The dual solver was called on a position that does not violate the bound.
    #[error("trust region not violated at entry: KL {kl} <= epsilon {epsilon}")]
    NotViolated { kl: f64, epsilon: f64 },

    /// Even at the upper end of the η bracket the constraint is still violated.
    #[error("bracket exhausted: KL {kl_at_upper} at eta = {eta_upper} still exceeds epsilon {epsilon}")]
    BracketExhausted {
        kl_at_upper: f64,
        eta_upper: f64,
        epsilon: f64,
    },

    #[error("inconsistent projection outcome: {0}")]
    InconsistentOutcome(String),

    #[error("element {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn at(index: usize, source: Error) -> Self {
        Error::Batch {
            index,
            source: Box::new(source),
        }
    }

    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_)
            | Error::Config(_)
            | Error::VocabMismatch { .. }
            | Error::SupportMismatch(_)
            | Error::Domain(_)
            | Error::Serde(_) => true,
            Error::Batch { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
