use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{0}: empty sequence")]
    Empty(&'static str),
    #[error("negative cost {value} at index {index}")]
    NegativeCost { index: usize, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate range: {0}")]
    Degenerate(&'static str),
    #[error("trajectory {index}: {reason}")]
    Trajectory { index: usize, reason: String },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: [usize; 2], rhs: [usize; 2] },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("non-integer {what} {value}: rescale rewards/costs to integer units")]
    NonInteger { what: &'static str, value: f64 },
    #[error("conditioning event has zero probability at state {state}, step {step}, target {target:?}")]
    ZeroProbability { state: usize, step: usize, target: (i64, i64) },
    #[error("graph: {0}")]
    Graph(&'static str),
    #[error("training diverged at iteration {iter}: {detail}")]
    Diverged { iter: u64, detail: String },
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
