use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A structural invariant of a simulated structure was broken. This
    /// always indicates a simulator bug and aborts the run.
    #[error("internal invariant fault: {0}")]
    Invariant(String),

    #[error("histogram has no observations")]
    EmptyHistogram,

    #[error("no root on the increasing branch: {0}")]
    NoRoot(String),

    #[error("zero denominator while evaluating {0}")]
    ZeroDenominator(&'static str),

    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("expected attack cost {expected} x {trials} trials exceeds budget {budget}")]
    BudgetExceeded {
        expected: String,
        trials: u64,
        budget: u64,
    },

    #[error("eviction-set search failed: {0}")]
    Gem(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn is_invariant(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}
