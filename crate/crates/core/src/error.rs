use thiserror::Error;

use crate::dsl::Var;
use crate::mf_solver::PicardTrace;

/// Errors produced by the solver stack.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unbound variable `{0}`")]
    UnboundVariable(Var),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty population")]
    EmptyPopulation,

    #[error("singular regression system in group {group}")]
    SingularSystem { group: usize },

    #[error("divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("iteration limit reached after {} iterations (last distance {:e})", .trace.iterations, .trace.last_distance())]
    IterationLimit { trace: PicardTrace },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
