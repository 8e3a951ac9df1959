use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: bad dimensions, probabilities that do not sum to one,
    /// out-of-range indices, invalid hyperparameters.
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    /// `F_h(eps, f_j^{h+1})` is empty: completeness fails at this level.
    #[error("empty cover set at step {step} for next-step member {next_member}")]
    EmptyCoverSet { step: usize, next_member: usize },

    #[error("enumeration size {size} exceeds cap {cap}")]
    CapExceeded { size: u128, cap: u128 },

    #[error("member value {value} < 0 at step {step}, member {member}, state {state}, action {action}")]
    NegativeValue {
        step: usize,
        member: usize,
        state: usize,
        action: usize,
        value: f64,
    },

    #[error("entry {index} is not strictly positive ({value})")]
    NonPositiveEntry { index: usize, value: f64 },

    #[error("eta = {eta} exceeds 0.4 / b^2 = {limit}")]
    EtaTooLarge { eta: f64, limit: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Errors caused by user input (exit code 1) as opposed to internal failures (exit code 2).
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Internal(_) => false,
            // A missing input file is the user's mistake; other I/O failures are not.
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => true,
        }
    }
}
