//! Joint training of a small neural network and discrete input-selection
//! masks.
//!
//! Masks decide which channels, pixels, blocks or quality versions of an
//! input are kept. They are discretized with the Gumbel-Max trick in the
//! forward pass and trained through a temperature-softmax surrogate, so
//! that after training only the selected part of each input has to be
//! transferred for inference.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod mask;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
