//! Incremental recovery of marginal and conditional covariance entries after
//! changes to the inference problem, plus the two baseline recovery methods.

pub mod cache;
mod change;
pub mod kernels;
mod recover;
mod slam_step;

pub use cache::{
    update_conditional, update_not_augmented, update_rectangular, update_relinearized,
    update_squared, CacheMode, CovarianceCache, CovarianceRequest,
};
pub use change::{ChangeData, ChangeKind, InferenceChange};
pub use kernels::{CrossMethod, UpdateWorkspace};
pub use recover::{prior_columns, recover_backsubstitution, recover_recursive};
pub use slam_step::{slam_step_update, MarginalTracker, SlamStep, StepStrategy};
