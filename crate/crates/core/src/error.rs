use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no table entry for context {0}")]
    UnknownContext(String),

    #[error("state is not terminal; use the oracle's marginal answer log-probability for prefixes")]
    NonTerminalState,

    #[error("token {token} has role {role}, expected {expected}")]
    WrongRole {
        token: usize,
        role: String,
        expected: &'static str,
    },

    #[error("enumeration budget exceeded: {required} nodes required, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("zero-probability conditioning: answer {answer} is unreachable from this state")]
    ZeroProbabilityConditioning { answer: usize },

    #[error("vocabulary too small: need at least {required} tokens, got {got}")]
    VocabTooSmall { required: usize, got: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("k = {k} exceeds n = {n}")]
    KExceedsN { k: usize, n: usize },

    #[error("mismatched instance sets: {0}")]
    MismatchedInstances(String),

    #[error("ratio/absolute gate blow-up: parameter magnitude {magnitude:e} exceeds {limit:e} at step {step}")]
    Divergence {
        step: usize,
        magnitude: f64,
        limit: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;
