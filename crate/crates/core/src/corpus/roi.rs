use serde::{Deserialize, Serialize};

use super::{Annotation, PanoramicImage, PixelBox};
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Minimum fraction of a box's own area that must fall inside an ROI for the
/// box to be kept in that crop.
pub const MIN_VISIBLE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    /// Side of the vertical midline holding the box center.
    pub fn of_box(b: &PixelBox, image_width: f64) -> Side {
        if b.center().0 < 0.5 * image_width {
            Side::Left
        } else {
            Side::Right
        }
    }
}

/// The two crop rectangles shared by every image of a run. Corners are whole
/// pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub left: PixelBox,
    pub right: PixelBox,
    pub margin_px: f64,
    pub derived_from: Vec<String>,
}

impl RoiSpec {
    pub fn get(&self, side: Side) -> &PixelBox {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.left.validate()?;
        self.right.validate()?;
        if self.left.intersection(&self.right).is_some() {
            return Err(Error::Validation("left and right ROIs overlap".into()));
        }
        if self.margin_px < 0.0 || !self.margin_px.is_finite() {
            return Err(Error::Validation("ROI margin must be a non-negative number".into()));
        }
        Ok(())
    }

    /// The ROI for `side` clamped to an image of the given size.
    pub fn clamped(&self, side: Side, width: usize, height: usize) -> PixelBox {
        snap_outward(self.get(side)).clip(width as f64, height as f64)
    }
}

/// Derives the ROI pair from training annotations.
///
/// Each side's rectangle is the min/max envelope of that side's boxes, grown
/// by `margin_px`, snapped outward to whole pixels and clamped to the image.
/// If the two envelopes would overlap they are cut at the vertical midline.
pub fn compute_roi_spec(
    train_annotations: &[Annotation],
    image_dims: (usize, usize),
    margin_px: f64,
) -> Result<RoiSpec> {
    compute_roi_spec_with_overrides(train_annotations, image_dims, margin_px, [None, None])
}

/// [`compute_roi_spec`] where `overrides[side as usize]`, when present,
/// replaces the derived rectangle of that side (and so also covers a side
/// without training boxes).
pub fn compute_roi_spec_with_overrides(
    train_annotations: &[Annotation],
    image_dims: (usize, usize),
    margin_px: f64,
    overrides: [Option<PixelBox>; 2],
) -> Result<RoiSpec> {
    if !(margin_px >= 0.0 && margin_px.is_finite()) {
        return Err(Error::Validation(format!("ROI margin must be >= 0, got {margin_px}")));
    }
    let (w, h) = (image_dims.0 as f64, image_dims.1 as f64);
    let mut envelopes: [Option<PixelBox>; 2] = [None, None];
    let mut derived_from = Vec::new();
    for ann in train_annotations.iter().filter(|a| a.consensus && a.has_acp()) {
        derived_from.push(ann.image_id.clone());
        for b in &ann.boxes {
            let slot = &mut envelopes[Side::of_box(b, w) as usize];
            *slot = Some(slot.map_or(*b, |e| e.union_envelope(b)));
        }
    }
    derived_from.sort();
    derived_from.dedup();

    let grow = |side: Side| -> Result<PixelBox> {
        if let Some(o) = overrides[side as usize] {
            o.validate()?;
            return Ok(snap_outward(&o).clip(w, h));
        }
        let env = envelopes[side as usize].ok_or(Error::EmptyRoiSide { side: side.as_str() })?;
        Ok(snap_outward(&env.expand(margin_px)).clip(w, h))
    };
    let mut left = grow(Side::Left)?;
    let mut right = grow(Side::Right)?;
    if left.intersection(&right).is_some() {
        left.x_max = left.x_max.min((0.5 * w).floor());
        right.x_min = right.x_min.max((0.5 * w).floor());
    }
    let spec = RoiSpec { left, right, margin_px, derived_from };
    spec.validate()?;
    Ok(spec)
}

fn snap_outward(b: &PixelBox) -> PixelBox {
    PixelBox::raw(b.x_min.floor(), b.y_min.floor(), b.x_max.ceil(), b.y_max.ceil())
}

/// One cropped region with its ground truth in crop coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample {
    pub image_id: String,
    pub side: Side,
    pub raster: Raster<f32>,
    pub boxes: Vec<PixelBox>,
    /// Panoramic-frame rectangle this crop was taken from.
    pub region: PixelBox,
}

impl RoiSample {
    pub fn to_panoramic(&self, b: &PixelBox) -> PixelBox {
        b.translate(self.region.x_min, self.region.y_min)
    }

    pub fn to_crop(&self, b: &PixelBox) -> PixelBox {
        b.translate(-self.region.x_min, -self.region.y_min)
    }
}

/// Crops the left and right ROIs out of `image`, keeping each annotated box
/// whose visible part covers at least half of its own area. Kept boxes are
/// cut to the ROI and expressed in crop coordinates.
pub fn extract_rois(image: &PanoramicImage, spec: &RoiSpec, annotation: &Annotation) -> [RoiSample; 2] {
    Side::BOTH.map(|side| {
        let region = spec.clamped(side, image.width(), image.height());
        let (x0, y0) = (region.x_min as isize, region.y_min as isize);
        let (cw, ch) = (region.width().max(1.0) as usize, region.height().max(1.0) as usize);
        let raster = image.pixels.crop(x0, y0, cw, ch);
        let boxes = annotation
            .boxes
            .iter()
            .filter_map(|b| {
                let inside = b.intersection(&region)?;
                (inside.area() >= MIN_VISIBLE_FRACTION * b.area())
                    .then(|| inside.translate(-region.x_min, -region.y_min))
            })
            .collect();
        RoiSample { image_id: image.id.clone(), side, raster, boxes, region }
    })
}
