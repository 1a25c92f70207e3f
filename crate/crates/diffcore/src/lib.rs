//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records primitives as they execute; [`Tape::backward`] sweeps
//! it once in reverse to produce gradients for every parameter leaf. Tapes are
//! cheap and meant to be rebuilt per forward pass.

mod array;
mod error;
pub mod gradcheck;
pub mod optim;
mod tape;

pub use array::Array;
pub use error::{DiffError, Result};
pub use gradcheck::{finite_difference_check, finite_difference_check_subset, GradCheck};
pub use optim::{cosine_annealing, Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
