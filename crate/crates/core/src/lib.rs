pub mod body;
pub mod bvh;
pub mod container;
pub mod diffusion;
pub mod error;
pub mod kdtree;
pub mod lifting;
pub mod mesh;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod raster;
pub mod rigging;

pub use error::{Error, Result};
