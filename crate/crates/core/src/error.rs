use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("svd did not converge after {sweeps} sweeps (residual {residual:e})")]
    Convergence { sweeps: usize, residual: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("undefined metric {0}")]
    UndefinedMetric(String),

    #[error("ids present in only one file: {}", .0.join(", "))]
    UnmatchedIds(Vec<String>),

    #[error("invalid data: {0}")]
    Content(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
