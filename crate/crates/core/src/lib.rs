//! Context-conditioned multi-task image-to-image network.
//!
//! A single network maps an input image to an output image, with the task defined
//! at inference time by a context set of example (input, output) pairs.

pub mod augment;
pub mod datagen;
mod error;
pub mod evaluate;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
