//! Detection of carotid plaque calcifications on panoramic radiographs.
//!
//! The crate is generic over the floating point type (see [`Scalar`]); the
//! aliases below fix it to `f32` or `f64`.

pub mod augment;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod raster;
pub mod scalar;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type BoxF32 = geometry::BoundingBox<f32>;
pub type BoxF64 = geometry::BoundingBox<f64>;
pub type RasterF32 = raster::Raster<f32>;
pub type RasterF64 = raster::Raster<f64>;
pub type DetectorF32 = detector::Detector<f32>;
pub type DetectorF64 = detector::Detector<f64>;
pub type DetectionF32 = detector::Detection<f32>;
pub type DetectionF64 = detector::Detection<f64>;
