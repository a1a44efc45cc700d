//! Joint monocular depth and occlusion-boundary estimation.

pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod params;
pub mod train;

pub use error::{Error, Result};
