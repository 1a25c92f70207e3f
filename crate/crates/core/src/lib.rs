//! Sensitivity-guided adversarial protection for tiny neural radiance fields.

pub mod checkpoint;
pub mod downstream;
mod error;
pub mod eval;
pub mod fields;
pub mod fit;
pub mod params;
pub mod pipeline;
pub mod protect;
pub mod render;
pub mod scenes;

pub use diffcore;
pub use error::{Error, Result};
