use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("operation `{op}` requires a twice-differentiable activation, got relu")]
    UnsupportedActivation { op: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("solver diverged at iteration {iter}")]
    Divergence { iter: usize },

    #[error("solver diverged at epoch {epoch}: {source}")]
    TrainingDivergence {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("hessian for the newton step is missing")]
    MissingHessian,

    #[error("hessian is not positive definite (condition estimate {condition:e})")]
    SingularHessian { condition: f64 },

    #[error("backward pass needs a stationary point: residual {residual:e} exceeds {limit:e}")]
    NotStationary { residual: f64, limit: f64 },

    #[error("every sampled pair is closer than min_sep = {min_sep:e}")]
    NoValidPairs { min_sep: f64 },

    #[error("serialization: {0}")]
    Serialization(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            expected,
            got,
            context,
        });
    }
    Ok(())
}
