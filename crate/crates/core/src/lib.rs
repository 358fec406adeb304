//! Triple-path differentiable architecture search for multimodal binary
//! classification over text and image feature matrices.

pub mod autograd;
pub mod baseline;
pub mod cells;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod harness;
pub mod model;
pub mod nn;
pub mod paths;
pub mod searchspace;

pub use error::{MuseError, Result};
