//! Query embeddings for first-order logical queries over incomplete
//! knowledge graphs.
//!
//! Entity sets are cones on the complex unit circle (one per embedding
//! dimension) and relations act on them as rotations. Queries built from
//! projection, intersection, union and negation are executed bottom-up over
//! their DNF, and answers are ranked by a cone-to-point distance.

pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod operators;
pub mod query;
pub mod train;

pub use error::{Error, Result};
