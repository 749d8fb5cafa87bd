//! Gaussian factor-graph beliefs: variables, factors, MAP inference and the
//! information-form state with its square-root factorization.

mod factors;
mod jacobian;
mod solve;
mod state;

pub use factors::{FactorModel, GaussianFactor};
pub use jacobian::{linearize_factors, NoiseWeightedJacobian};
pub use solve::{
    apply_information_update, linearize_factors_into_belief, solve_map, RelinearizationReport,
    SolveOutput, SolverConfig,
};
pub use state::{BeliefState, FactorGraph, StateLayout, VarKind, VariableKey};

/// Square-root factorization of a sparse SPD information matrix under a
/// fill-reducing ordering.
pub use crate::linalg::cholesky::factorize;
