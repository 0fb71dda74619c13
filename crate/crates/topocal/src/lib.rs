//! Dictionary-based planar homography estimation over semantic maps.
//!
//! The toolkit synthesizes datasets from a bird's-eye semantic map through
//! a virtual PTZ camera, matches query views against a template dictionary,
//! refines the homography by descending a patch-based topological loss
//! through a differentiable warp, and evaluates estimates with IoU.

pub mod datagen;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod loss;
pub mod matching;
pub mod parallel;
pub mod raster;
pub mod refine;
pub mod scenes;

pub use error::{Error, Result};
