use thiserror::Error;

/// Error type shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or state supplied by the caller.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration file or value was rejected before any compute ran.
    #[error("config error: {0}")]
    Config(String),

    /// A required input artifact is missing or inconsistent.
    #[error("prerequisite error: {0}")]
    Prerequisite(String),

    /// Training or evaluation produced non-finite or degenerate numbers.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An eval-role network was offered where the attack role is required,
    /// or vice versa.
    #[error("role violation: {0}")]
    RoleViolation(String),

    /// The configured encoder query budget was exhausted.
    #[error("query budget exceeded: used {used} of {budget}")]
    BudgetExceeded { used: u64, budget: u64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn prerequisite(msg: impl Into<String>) -> Self {
        Error::Prerequisite(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
