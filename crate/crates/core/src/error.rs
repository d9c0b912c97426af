use crate::linalg::Vector;

/// Failures reported by the numerical routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),
    #[error("operator is numerically singular ({0})")]
    Singular(String),
    #[error("iteration did not converge after {iterations} steps (residual {residual:.3e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: Box<Vector>,
    },
    #[error("enumeration of {count} designs exceeds the budget of {budget}")]
    BudgetExceeded { count: u128, budget: u128 },
    #[error("capability `{capability}` is not licensed for {context}")]
    ForbiddenCapability {
        capability: &'static str,
        context: &'static str,
    },
    #[error("sample {index}: {source}")]
    InSample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("problem too large to densify: {size} > {limit}")]
    TooLarge { size: usize, limit: usize },
}

impl Error {
    /// The innermost error, looking through per-sample wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::InSample { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
