//! Incremental covariance recovery and belief-space planning over Gaussian
//! factor graphs.
//!
//! The crate tracks marginal (and conditional) covariance entries of an
//! information-form belief through arbitrary changes to the inference
//! problem — new factors, state augmentation, relinearization — without
//! re-inverting the posterior information matrix. On top of that capability
//! it evaluates information-theoretic planning objectives over a tree of
//! candidate actions, sharing the work of common action prefixes.
//!
//! Start with the runnable programs in `examples/`; each one demonstrates a
//! major capability end to end.

pub mod belief;
pub mod error;
pub mod linalg;
pub mod recovery;

pub use error::{Error, Result};

pub mod fgp;
pub mod ramdl;
pub mod verify;
