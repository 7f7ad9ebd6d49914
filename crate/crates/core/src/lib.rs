//! Multi-view consistent diffusion inpainting and radiance-field
//! distillation.

pub mod backend;
pub mod data;
pub mod diffusion;
pub mod du;
pub mod error;
pub mod field;
pub mod grid;
pub mod metrics;
pub mod rng;

pub use error::{Error, Result};
