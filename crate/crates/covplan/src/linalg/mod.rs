//! Shared linear-algebra support: sparse symmetric storage, fill-reducing
//! ordering, sparse Cholesky square roots and a few dense helpers.

pub mod cholesky;
pub mod dense;
pub mod ordering;
pub mod sparse;

pub use cholesky::SquareRootFactor;
pub use ordering::min_degree_ordering;
pub use sparse::{SparseSym, TripletBuilder};
