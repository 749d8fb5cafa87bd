use thiserror::Error;

use crate::belief::VariableKey;

/// Errors surfaced by inference, factorization and covariance operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("noise covariance is not positive definite")]
    NonSpdNoise,

    #[error("matrix is not positive definite (pivot {index} failed)")]
    NotPositiveDefinite { index: usize },

    #[error("square-root factor has a zero diagonal entry at {index}")]
    SingularFactor { index: usize },

    #[error("normal equations are singular; under-constrained variables: {0:?}")]
    UnderConstrained(Vec<VariableKey>),

    #[error("new-variable Jacobian block is rank deficient")]
    RankDeficientNewBlock,

    #[error("posterior information lost positive definiteness during downdate")]
    InconsistentDowndate,

    #[error("unknown variable {0:?} in this layout")]
    UnknownVariable(VariableKey),

    #[error("covariance cache is missing a block for {0:?}")]
    MissingCacheBlock(VariableKey),

    #[error("recovery methods disagree on {context}: max deviation {deviation:.3e} at step {step}")]
    MethodDisagreement {
        context: &'static str,
        deviation: f64,
        step: usize,
    },

    #[error("planner decisions diverge at step {step}: tree chose {tree_choice}, flat chose {flat_choice}")]
    DecisionMismatch {
        step: usize,
        tree_choice: usize,
        flat_choice: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
