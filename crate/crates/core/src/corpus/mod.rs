//! Dataset model: panoramic images, consensus annotations, manifests,
//! stratified splitting and the fixed left/right regions of interest.

mod manifest;
mod roi;
mod split;

pub(crate) use manifest::write_atomic;
pub use manifest::{load_manifest, save_manifest, AnnotationEntry, Corpus, ImageEntry, Manifest, MANIFEST_VERSION};
pub use roi::{compute_roi_spec, compute_roi_spec_with_overrides, extract_rois, RoiSample, RoiSpec, Side};
pub use split::{split_dataset, DatasetSplit, SplitFractions};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::{read_png, BitDepth, Raster};

/// Box type used by the dataset model: `f64` pixel coordinates.
pub type PixelBox = BoundingBox<f64>;

/// A loaded grayscale radiograph, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoramicImage {
    pub id: String,
    pub pixels: Raster<f32>,
    pub device_tag: String,
    pub bit_depth_source: BitDepth,
}

impl PanoramicImage {
    pub fn new(id: impl Into<String>, pixels: Raster<f32>, device_tag: impl Into<String>, depth: BitDepth) -> Result<Self> {
        if !pixels.is_normalized() {
            return Err(Error::Validation("image intensities must lie in [0, 1]".into()));
        }
        Ok(Self { id: id.into(), pixels, device_tag: device_tag.into(), bit_depth_source: depth })
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// Manifest entry for an image whose pixels have not been read yet.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRef {
    pub id: String,
    pub path: PathBuf,
    pub device_tag: String,
    pub width: usize,
    pub height: usize,
}

impl ImageRef {
    pub fn load(&self) -> Result<PanoramicImage> {
        let load_err = |reason: String| Error::ImageLoad { id: self.id.clone(), path: self.path.clone(), reason };
        let (pixels, depth) = read_png(&self.path).map_err(load_err)?;
        if pixels.width() != self.width || pixels.height() != self.height {
            return Err(load_err(format!(
                "decoded size {}x{} differs from manifest {}x{}",
                pixels.width(),
                pixels.height(),
                self.width,
                self.height
            )));
        }
        PanoramicImage::new(self.id.clone(), pixels, self.device_tag.clone(), depth)
    }
}

/// Ground truth for one image. An empty box list means normal anatomy.
/// Boxes may overlap: a plaque can consist of several small components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub boxes: Vec<PixelBox>,
    pub annotator_ids: Vec<String>,
    pub consensus: bool,
}

impl Annotation {
    pub fn normal(image_id: impl Into<String>) -> Self {
        Self { image_id: image_id.into(), boxes: Vec::new(), annotator_ids: Vec::new(), consensus: true }
    }

    pub fn has_acp(&self) -> bool {
        !self.boxes.is_empty()
    }
}
