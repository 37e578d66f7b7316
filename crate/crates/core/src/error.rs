use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model or scenario violates one of its structural invariants.
    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("agent index {index} out of range for {n_agents} agents")]
    IndexOutOfRange { index: usize, n_agents: usize },

    #[error("missing control for agent {agent}")]
    MissingControl { agent: usize },

    #[error("numerical blow-up at t = {t}: {detail}")]
    BlowUp { t: f64, detail: String },

    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    #[error("inadmissible policy at iteration {iteration}: {detail}")]
    InadmissiblePolicy { iteration: usize, detail: String },

    #[error("gain conditions unsatisfied: {0}")]
    GainConditions(String),

    #[error("missing statistics: {0}")]
    MissingStatistics(String),

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("unknown builtin: {0}")]
    UnknownBuiltin(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        }
    }
}
