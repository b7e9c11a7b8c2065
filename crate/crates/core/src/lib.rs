//! Online refinement of a pixel-wise scene segmentation model by weight
//! imprinting.
//!
//! A person touches plant regions that the model gets wrong; the touches are
//! turned into training masks through an RGB-D voxel pipeline
//! ([`geometry`]), the masked features of a handful of support images are
//! pooled into a prototype ([`imprinting`]) and the prototype becomes the
//! weight vector of a new class in the cosine classifier ([`model`]). No
//! gradient is computed at refinement time. [`eval`] holds the metrics and
//! experiment harnesses, [`checkpoint`] and [`dataset`] the on-disk formats.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imprinting;
pub mod model;
pub mod par;
pub mod raster;

pub use error::{Error, Result};
pub use raster::{BinaryMask, LabelMap};

/// Class indices of the three pre-trained scene classes.
pub mod classes {
    pub const PLANT: usize = 0;
    pub const ARTIFICIAL: usize = 1;
    pub const GROUND: usize = 2;
    pub const NAMES: [&str; 3] = ["plant", "artificial", "ground"];
}
