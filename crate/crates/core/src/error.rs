use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(
        "matrix is not positive definite (pivot {pivot} = {value:e}); \
         add Hessian regularization or solve the forward problem more accurately"
    )]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(
        "constraint Jacobian is rank deficient (singular value ratio {ratio:e}); \
         remove redundant constraints"
    )]
    RankDeficientA { ratio: f64 },

    #[error(
        "numerical underflow in linear-domain Sinkhorn at batch {batch}; \
         retry with the log-domain solver"
    )]
    NumericalUnderflow { batch: usize },
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
