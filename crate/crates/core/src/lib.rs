//! RGBD diffusion prior and physics-guided posterior sampling for
//! underwater image restoration.

pub mod denoiser;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod formation;
pub mod guidance;
pub mod nn;
pub mod raster;

pub use error::{Error, Result};
pub use raster::{Raster, RgbdImage};
