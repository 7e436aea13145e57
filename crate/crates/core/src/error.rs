use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("KKT matrix is numerically singular")]
    SingularSystem,
    #[error("Schur complement is singular (rank-deficient constraint matrix)")]
    SingularSchur,
    #[error("matrix is not positive definite{}", stage_suffix(.stage))]
    NotPositiveDefinite { stage: Option<usize> },
    #[error("constraint right-hand side is inconsistent with the range of the constraint matrix")]
    InconsistentConstraint,
    #[error("callback failure at stage {stage}: {what}")]
    CallbackFailure { stage: usize, what: String },
    #[error("stagewise constraint block is singular at stage {stage}")]
    SingularConstraintBlock { stage: usize },
    #[error("retained factorizations are missing")]
    StaleFactorization,
    #[error("endpoint operator is singular")]
    SingularEndpointOperator,
    #[error("endpoint constraint is inconsistent")]
    InconsistentEndpoint,
    #[error("line search exhausted the step ladder")]
    LineSearchFailure,
    #[error("non-finite state at stage {stage}")]
    NonFiniteState { stage: usize },
    #[error("regularization saturated at its upper bound")]
    RegularizationSaturated,
    #[error("merit exceeded the divergence guard")]
    Diverged,
    #[error("unknown problem family `{0}`")]
    UnknownFamily(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

fn stage_suffix(stage: &Option<usize>) -> String {
    match stage {
        Some(k) => format!(" at stage {k}"),
        None => String::new(),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
