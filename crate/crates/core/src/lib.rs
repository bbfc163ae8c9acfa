//! Operator-splitting neural PDE surrogates: finite-difference stencils for
//! linear terms, neural operators for non-linear terms, reference solvers,
//! training and evaluation.

pub mod datagen;
pub mod dynamics;
pub mod error;
pub mod field;
pub mod integrate;
pub mod metrics;
pub mod neural;
pub mod rhs;
pub mod rng;
pub mod setup;
pub mod stencil;
pub mod train;

pub use error::{CoreError, Result};
pub use field::Field;
