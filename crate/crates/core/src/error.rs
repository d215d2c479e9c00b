use thiserror::Error;

use crate::policy::PolicyError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Every violated invariant, one message per entry.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("unknown usecase `{0}`")]
    UnknownUsecase(String),

    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },

    #[error("duplicate {kind} `{id}`")]
    Duplicate { kind: &'static str, id: String },

    #[error("usecase mismatch: `{0}` vs `{1}`")]
    UsecaseMismatch(String, String),

    #[error("kind mismatch: {}", .0.join("; "))]
    KindMismatch(Vec<String>),

    #[error("wrong decision space: expected {expected}, usecase uses {actual}")]
    WrongDecisionSpace { expected: String, actual: String },

    #[error(transparent)]
    Policy(#[from] PolicyError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("nothing to roll back to for usecase `{0}`")]
    NothingToRollback(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("remote call failed: {0}")]
    Remote(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant, used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::UnknownUsecase(_) => "unknown_usecase",
            Error::NotFound { .. } => "not_found",
            Error::Duplicate { .. } => "duplicate",
            Error::UsecaseMismatch(..) => "usecase_mismatch",
            Error::KindMismatch(_) => "kind_mismatch",
            Error::WrongDecisionSpace { .. } => "wrong_decision_space",
            Error::Policy(_) => "policy",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InsufficientData(_) => "insufficient_data",
            Error::NothingToRollback(_) => "nothing_to_rollback",
            Error::Capacity(_) => "capacity",
            Error::State(_) => "state",
            Error::Remote(_) => "remote",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        Error::NotFound { kind, id: id.into() }
    }

    pub(crate) fn duplicate(kind: &'static str, id: impl Into<String>) -> Self {
        Error::Duplicate { kind, id: id.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
