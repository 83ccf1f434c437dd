//! Seedable augmentation of ROI crops: brightness shift, horizontal flip and
//! rotation, with the boxes carried through every geometric change.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::seed::item_rng;

/// A rotated or clipped box survives only if it keeps this fraction of its
/// pre-clamp area.
pub const MIN_KEPT_AREA_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AugmentationOp {
    Brightness { brightness_delta: f64 },
    Hflip,
    Rotate { angle_deg: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub brightness_range: [f64; 2],
    pub angle_range: [f64; 2],
    pub per_sample_count: usize,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { brightness_range: [-0.3, 0.3], angle_range: [-15.0, 15.0], per_sample_count: 200, flip_probability: 0.5 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [b0, b1] = self.brightness_range;
        let [a0, a1] = self.angle_range;
        if !(b0 <= b1 && b0 >= -1.0 && b1 <= 1.0) {
            return Err(Error::Config(format!("brightness_range {:?} must be ordered within [-1, 1]", self.brightness_range)));
        }
        if !(a0 <= a1 && a0 >= -180.0 && a1 <= 180.0) {
            return Err(Error::Config(format!("angle_range {:?} must be ordered within [-180, 180]", self.angle_range)));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!("flip_probability {} outside [0, 1]", self.flip_probability)));
        }
        Ok(())
    }

    fn check_op(&self, op: &AugmentationOp) -> Result<()> {
        match *op {
            AugmentationOp::Brightness { brightness_delta: d }
                if d < self.brightness_range[0] || d > self.brightness_range[1] =>
            {
                Err(Error::Validation(format!("brightness delta {d} outside {:?}", self.brightness_range)))
            }
            AugmentationOp::Rotate { angle_deg: a } if a < self.angle_range[0] || a > self.angle_range[1] => {
                Err(Error::Validation(format!("rotation {a} deg outside {:?}", self.angle_range)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    /// Operations in application order.
    pub ops: Vec<AugmentationOp>,
    pub seed: u64,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample<T> {
    pub raster: Raster<T>,
    pub boxes: Vec<BoundingBox<T>>,
    pub provenance: Provenance,
}

/// `clamp(v + delta, 0, 1)` per pixel.
pub fn apply_brightness<T: Scalar>(raster: &Raster<T>, delta: T) -> Raster<T> {
    raster.map(|v| (v + delta).clamp_to(T::zero(), T::one()))
}

/// Mirror about the vertical center line: pixel `x` moves to `W - 1 - x`,
/// box `[x0, y0, x1, y1]` to `[W - x1, y0, W - x0, y1]`.
pub fn apply_hflip<T: Scalar>(raster: &Raster<T>, boxes: &[BoundingBox<T>]) -> (Raster<T>, Vec<BoundingBox<T>>) {
    let w = raster.width();
    let out = Raster::from_fn(w, raster.height(), |x, y| raster.get(w - 1 - x, y));
    let wt = T::from_usize_lossy(w);
    let boxes = boxes.iter().map(|b| BoundingBox::raw(wt - b.x_max, b.y_min, wt - b.x_min, b.y_max)).collect();
    (out, boxes)
}

/// Rotates a point about `(cx, cy)`; positive angles turn `+x` toward `+y`
/// (clockwise on screen, where `y` points down).
pub fn rotate_point<T: Scalar>(x: T, y: T, cx: T, cy: T, angle_deg: T) -> (T, T) {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    (cx + c * dx - s * dy, cy + s * dx + c * dy)
}

/// Axis-aligned envelope of the four rotated corners of `b`.
pub fn rotated_envelope<T: Scalar>(b: &BoundingBox<T>, cx: T, cy: T, angle_deg: T) -> BoundingBox<T> {
    let pts = b.corners().map(|(x, y)| rotate_point(x, y, cx, cy, angle_deg));
    let (mut x0, mut y0) = (T::infinity(), T::infinity());
    let (mut x1, mut y1) = (T::neg_infinity(), T::neg_infinity());
    for (x, y) in pts {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    BoundingBox::raw(x0, y0, x1, y1)
}

/// Rotates the raster about its center with bilinear resampling, keeping the
/// canvas size and filling uncovered pixels with zero. Each box becomes the
/// envelope of its rotated corners clamped to the frame, and is dropped when
/// the clamp removes more than half of the envelope's area.
pub fn apply_rotation<T: Scalar>(
    raster: &Raster<T>,
    boxes: &[BoundingBox<T>],
    angle_deg: T,
) -> (Raster<T>, Vec<BoundingBox<T>>) {
    if angle_deg == T::zero() {
        return (raster.clone(), boxes.to_vec());
    }
    let half = T::lit(0.5);
    let (w, h) = (T::from_usize_lossy(raster.width()), T::from_usize_lossy(raster.height()));
    let (cx, cy) = (half * w, half * h);
    let out = Raster::from_fn(raster.width(), raster.height(), |x, y| {
        let qx = T::from_usize_lossy(x) + half;
        let qy = T::from_usize_lossy(y) + half;
        let (sx, sy) = rotate_point(qx, qy, cx, cy, -angle_deg);
        raster.sample_bilinear(sx - half, sy - half, T::zero())
    });
    let min_frac = T::lit(MIN_KEPT_AREA_FRACTION);
    let boxes = boxes
        .iter()
        .filter_map(|b| {
            let env = rotated_envelope(b, cx, cy, angle_deg);
            let clamped = env.clip(w, h);
            (clamped.area() >= min_frac * env.area() && clamped.area() > T::zero()).then_some(clamped)
        })
        .collect();
    (out, boxes)
}

/// Applies one operation after checking it against the configured ranges.
pub fn apply_op<T: Scalar>(
    op: &AugmentationOp,
    config: &AugmentConfig,
    raster: &Raster<T>,
    boxes: &[BoundingBox<T>],
) -> Result<(Raster<T>, Vec<BoundingBox<T>>)> {
    config.check_op(op)?;
    Ok(match *op {
        AugmentationOp::Brightness { brightness_delta } => {
            (apply_brightness(raster, T::lit(brightness_delta)), boxes.to_vec())
        }
        AugmentationOp::Hflip => apply_hflip(raster, boxes),
        AugmentationOp::Rotate { angle_deg } => apply_rotation(raster, boxes, T::lit(angle_deg)),
    })
}

/// Draws the operation list for augmentation `index`. Index 0 is the
/// identity; every other index draws a brightness shift, a flip with
/// `flip_probability`, and a rotation, from a stream seeded by `(seed, index)`.
pub fn draw_ops(config: &AugmentConfig, seed: u64, index: u64) -> Vec<AugmentationOp> {
    if index == 0 {
        return Vec::new();
    }
    let mut rng = item_rng(seed, index);
    let uniform = |rng: &mut rand_chacha::ChaCha8Rng, [lo, hi]: [f64; 2]| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    let delta = uniform(&mut rng, config.brightness_range);
    let flip = rng.random::<f64>() < config.flip_probability;
    let angle = uniform(&mut rng, config.angle_range);
    let mut ops = vec![AugmentationOp::Brightness { brightness_delta: delta }];
    if flip {
        ops.push(AugmentationOp::Hflip);
    }
    ops.push(AugmentationOp::Rotate { angle_deg: angle });
    ops
}

/// Produces augmentation `index` of a sample. Depends only on
/// `(sample, config, seed, index)`.
pub fn augment_one<T: Scalar>(
    source_id: &str,
    raster: &Raster<T>,
    boxes: &[BoundingBox<T>],
    config: &AugmentConfig,
    seed: u64,
    index: u64,
) -> AugmentedSample<T> {
    let ops = draw_ops(config, seed, index);
    let (mut r, mut b) = (raster.clone(), boxes.to_vec());
    for op in &ops {
        (r, b) = apply_op(op, config, &r, &b).expect("drawn ops respect the configured ranges");
    }
    AugmentedSample { raster: r, boxes: b, provenance: Provenance { source_id: source_id.into(), ops, seed, index } }
}

/// `count` augmentations of one sample; the first is the identity.
pub fn augment_plan<T: Scalar>(
    source_id: &str,
    raster: &Raster<T>,
    boxes: &[BoundingBox<T>],
    config: &AugmentConfig,
    seed: u64,
    count: usize,
) -> Vec<AugmentedSample<T>> {
    (0..count as u64).map(|i| augment_one(source_id, raster, boxes, config, seed, i)).collect()
}

/// Replays a recorded provenance on the original sample.
pub fn replay<T: Scalar>(
    raster: &Raster<T>,
    boxes: &[BoundingBox<T>],
    config: &AugmentConfig,
    provenance: &Provenance,
) -> Result<(Raster<T>, Vec<BoundingBox<T>>)> {
    let (mut r, mut b) = (raster.clone(), boxes.to_vec());
    for op in &provenance.ops {
        (r, b) = apply_op(op, config, &r, &b)?;
    }
    Ok((r, b))
}
