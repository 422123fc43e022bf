//! Identity-patch conditioning for multi-identity diffusion.

pub mod error;
pub mod evalkit;
pub mod model;
pub mod cli;
pub mod condimage;
pub mod diffusion_core;
pub mod nn;
pub mod pose;
pub mod projector;
pub mod raster;
pub mod sampler;
pub mod synthid;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
