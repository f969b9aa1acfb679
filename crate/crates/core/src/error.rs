use alloc::string::String;
use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A natural parameter lies outside its family's domain.
    #[error("natural parameter outside the family domain ({0})")]
    Domain(&'static str),
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A matrix that must be symmetric positive definite is not.
    /// Index 0 is the prior covariance, index `j >= 1` the `j`-th shard.
    #[error("matrix {index} is not symmetric positive definite")]
    NotPositiveDefinite { index: usize },
    #[error("non-finite evaluation: {0}")]
    Evaluation(String),
    #[error("state space has {size} states, capacity is {capacity}")]
    Capacity { size: usize, capacity: usize },
    #[error("logic error: {0}")]
    Logic(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// A likelihood lower bound exceeds the likelihood.
    #[error("bound exceeds likelihood at datum {index} (log B - log L = {excess})")]
    BoundViolation { index: usize, excess: f64 },
    #[error("conditional sampler for variable {index} failed: {reason}")]
    Conditional { index: usize, reason: String },
    /// The simulator hit its step limit; the trace so far stays on the cluster.
    #[error("simulation exceeded its limit of {limit} events")]
    Timeout { limit: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn arg(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
