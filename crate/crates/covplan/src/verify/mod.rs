//! Randomized oracle suites: every incremental result is replayed against a
//! dense reconstruction of the posterior. Used by the `verify` subcommand and
//! by the acceptance tests.

pub mod gen;
pub mod oracle;
mod suites;

pub use suites::{run_suites, SuiteOutcome, VerifyOptions};
