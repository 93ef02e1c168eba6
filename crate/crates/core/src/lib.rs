//! Kronecker recurrent units.
//!
//! Recurrent networks whose recurrence matrix is a Kronecker product of small
//! factors, trained with backpropagation through time and a soft unitary
//! penalty on each factor.

pub mod artifacts;
pub mod cells;
pub mod diagnostics;
pub mod experiment;
pub mod gradcheck;
pub mod kron;
pub mod linalg;
pub mod rng;
pub mod tasks;
pub mod training;

pub use kron::{FactorShape, KroneckerMatrix};
pub use linalg::{Field, Matrix, C64};
