//! Axis-aligned boxes, overlap, greedy suppression and the anchor-relative
//! box parameterization used by both detector stages.
//!
//! Coordinates are continuous pixels with the origin at the top-left corner
//! and `y` growing downward. A box `[x_min, y_min, x_max, y_max]` covering the
//! single pixel `(0, 0)` is `[0, 0, 1, 1]`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{total_cmp, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Scalar> BoundingBox<T> {
    /// Validated constructor: coordinates finite, `min < max` on both axes.
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    /// Constructor without validation, for intermediate results that may be
    /// degenerate (clipping, envelopes under construction).
    pub const fn raw(x_min: T, y_min: T, x_max: T, y_max: T) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        let half = T::lit(0.5);
        Self::raw(cx - half * w, cy - half * h, cx + half * w, cy + half * h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite());
        let reason = if !finite {
            Some("non-finite coordinate")
        } else if self.x_min >= self.x_max {
            Some("x_min must be < x_max")
        } else if self.y_min >= self.y_max {
            Some("y_min must be < y_max")
        } else {
            None
        };
        match reason {
            None => Ok(()),
            Some(reason) => Err(Error::InvalidBox {
                x_min: self.x_min.as_f64(),
                y_min: self.y_min.as_f64(),
                x_max: self.x_max.as_f64(),
                y_max: self.y_max.as_f64(),
                reason,
            }),
        }
    }

    /// Checks that the box is valid and lies inside a `width x height` frame.
    pub fn validate_within(&self, width: T, height: T) -> Result<()> {
        self.validate()?;
        if self.x_min < T::zero() || self.y_min < T::zero() || self.x_max > width || self.y_max > height {
            return Err(Error::InvalidBox {
                x_min: self.x_min.as_f64(),
                y_min: self.y_min.as_f64(),
                x_max: self.x_max.as_f64(),
                y_max: self.y_max.as_f64(),
                reason: "box exceeds image bounds",
            });
        }
        Ok(())
    }

    #[inline]
    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    /// Area, zero for degenerate or inverted boxes.
    #[inline]
    pub fn area(&self) -> T {
        self.width().max(T::zero()) * self.height().max(T::zero())
    }

    #[inline]
    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        (half * (self.x_min + self.x_max), half * (self.y_min + self.y_max))
    }

    /// Overlap rectangle; `None` when the interiors do not intersect.
    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let b = Self::raw(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        );
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        self.intersection(other).map_or(T::zero(), |b| b.area())
    }

    /// Smallest box containing both.
    pub fn union_envelope(&self, other: &Self) -> Self {
        Self::raw(
            self.x_min.min(other.x_min),
            self.y_min.min(other.y_min),
            self.x_max.max(other.x_max),
            self.y_max.max(other.y_max),
        )
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self::raw(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn expand(&self, margin: T) -> Self {
        Self::raw(self.x_min - margin, self.y_min - margin, self.x_max + margin, self.y_max + margin)
    }

    /// Clamps every coordinate into `[0, width] x [0, height]`. The result may
    /// be degenerate.
    pub fn clip(&self, width: T, height: T) -> Self {
        Self::raw(
            self.x_min.clamp_to(T::zero(), width),
            self.y_min.clamp_to(T::zero(), height),
            self.x_max.clamp_to(T::zero(), width),
            self.y_max.clamp_to(T::zero(), height),
        )
    }

    pub fn contains_box(&self, other: &Self) -> bool {
        other.x_min >= self.x_min && other.y_min >= self.y_min && other.x_max <= self.x_max && other.y_max <= self.y_max
    }

    pub fn contains_point(&self, x: T, y: T) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn corners(&self) -> [(T, T); 4] {
        [
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
            (self.x_max, self.y_max),
            (self.x_min, self.y_max),
        ]
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn cast<U: Scalar>(&self) -> BoundingBox<U> {
        BoundingBox::raw(
            U::lit(self.x_min.as_f64()),
            U::lit(self.y_min.as_f64()),
            U::lit(self.x_max.as_f64()),
            U::lit(self.y_max.as_f64()),
        )
    }
}

/// Intersection over union in `[0, 1]`; zero when the union is empty.
pub fn iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        (inter / union).clamp_to(T::zero(), T::one())
    }
}

/// A box with a confidence attached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored<T> {
    #[serde(rename = "box")]
    pub bbox: BoundingBox<T>,
    pub score: T,
}

impl<T: Scalar> Scored<T> {
    pub fn new(bbox: BoundingBox<T>, score: T) -> Self {
        Self { bbox, score }
    }
}

/// Ordering used by [`nms`]: descending score, then smaller `x_min`, then
/// smaller `y_min`.
pub fn score_order<T: Scalar>(a: &Scored<T>, b: &Scored<T>) -> Ordering {
    total_cmp(b.score, a.score)
        .then_with(|| total_cmp(a.bbox.x_min, b.bbox.x_min))
        .then_with(|| total_cmp(a.bbox.y_min, b.bbox.y_min))
}

/// Greedy non-maximum suppression.
///
/// Repeatedly keeps the best remaining item and discards every remaining item
/// whose IoU with it is strictly greater than `iou_threshold`. The output is in
/// [`score_order`].
pub fn nms<T: Scalar>(items: &[Scored<T>], iou_threshold: T) -> Vec<Scored<T>> {
    nms_indices(items, iou_threshold).into_iter().map(|i| items[i]).collect()
}

/// Same as [`nms`], returning indices into `items`.
pub fn nms_indices<T: Scalar>(items: &[Scored<T>], iou_threshold: T) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| score_order(&items[a], &items[b]).then(a.cmp(&b)));

    let mut suppressed = vec![false; items.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou(&items[i].bbox, &items[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Regression target of a box relative to a reference box:
/// center offsets scaled by the reference size, log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDeltas<T> {
    pub dx: T,
    pub dy: T,
    pub dw: T,
    pub dh: T,
}

impl<T: Scalar> BoxDeltas<T> {
    pub fn zero() -> Self {
        Self { dx: T::zero(), dy: T::zero(), dw: T::zero(), dh: T::zero() }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self { dx: a[0], dy: a[1], dw: a[2], dh: a[3] }
    }
}

pub fn encode_box<T: Scalar>(reference: &BoundingBox<T>, target: &BoundingBox<T>) -> BoxDeltas<T> {
    let (rw, rh) = (reference.width(), reference.height());
    let (rcx, rcy) = reference.center();
    let (tcx, tcy) = target.center();
    BoxDeltas {
        dx: (tcx - rcx) / rw,
        dy: (tcy - rcy) / rh,
        dw: (target.width() / rw).ln(),
        dh: (target.height() / rh).ln(),
    }
}

/// Exact inverse of [`encode_box`]. Fails when the decoded size is not finite.
pub fn decode_box<T: Scalar>(reference: &BoundingBox<T>, deltas: &BoxDeltas<T>) -> Result<BoundingBox<T>> {
    let (rw, rh) = (reference.width(), reference.height());
    let (rcx, rcy) = reference.center();
    let cx = rcx + deltas.dx * rw;
    let cy = rcy + deltas.dy * rh;
    let w = rw * deltas.dw.exp();
    let h = rh * deltas.dh.exp();
    if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteDecode(deltas.to_array().map(Scalar::as_f64)));
    }
    Ok(BoundingBox::from_center(cx, cy, w, h))
}

/// [`decode_box`] followed by clipping to a `width x height` frame.
pub fn decode_clipped<T: Scalar>(
    reference: &BoundingBox<T>,
    deltas: &BoxDeltas<T>,
    width: T,
    height: T,
) -> Result<BoundingBox<T>> {
    decode_box(reference, deltas).map(|b| b.clip(width, height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox<f64> {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_relative_eq!(iou(&a, &b(1.0, 0.0, 3.0, 2.0)), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn iou_touching_edges_is_zero() {
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn iou_f32() {
        let a = BoundingBox::<f32>::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let c = BoundingBox::<f32>::new(1.0, 0.0, 3.0, 2.0).unwrap();
        assert!((iou(&a, &c) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoundingBox::new(30.0, 0.0, 30.0, 10.0).is_err());
        assert!(BoundingBox::new(0.0, 5.0, 1.0, 4.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn validate_within_bounds() {
        assert!(b(0.0, 0.0, 10.0, 10.0).validate_within(10.0, 10.0).is_ok());
        assert!(b(0.0, 0.0, 10.5, 10.0).validate_within(10.0, 10.0).is_err());
    }

    #[test]
    fn nms_identical_boxes_keeps_best() {
        let x = b(0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[Scored::new(x, 0.8), Scored::new(x, 0.9)], 0.5);
        assert_eq!(kept, vec![Scored::new(x, 0.9)]);
    }

    #[test]
    fn nms_disjoint_keeps_all_sorted() {
        let items = [
            Scored::new(b(0.0, 0.0, 1.0, 1.0), 0.2),
            Scored::new(b(5.0, 0.0, 6.0, 1.0), 0.7),
            Scored::new(b(9.0, 0.0, 10.0, 1.0), 0.5),
        ];
        let kept = nms(&items, 0.3);
        let scores: Vec<f64> = kept.iter().map(|s| s.score).collect();
        assert_eq!(scores, vec![0.7, 0.5, 0.2]);
    }

    #[test]
    fn nms_tie_break_on_position() {
        let items = [
            Scored::new(b(4.0, 0.0, 5.0, 1.0), 0.5),
            Scored::new(b(0.0, 3.0, 1.0, 4.0), 0.5),
            Scored::new(b(0.0, 1.0, 1.0, 2.0), 0.5),
        ];
        let kept = nms(&items, 0.5);
        assert_eq!(kept[0].bbox.y_min, 1.0);
        assert_eq!(kept[1].bbox.y_min, 3.0);
        assert_eq!(kept[2].bbox.x_min, 4.0);
    }

    #[test]
    fn nms_threshold_is_strict() {
        // IoU exactly 1/3 is not above a 1/3 threshold.
        let items = [Scored::new(b(0.0, 0.0, 2.0, 2.0), 0.9), Scored::new(b(1.0, 0.0, 3.0, 2.0), 0.8)];
        assert_eq!(nms(&items, 0.5).len(), 2);
        assert_eq!(nms(&items, 0.3).len(), 1);
    }

    #[test]
    fn encode_identity_is_zero() {
        let a = b(3.0, 4.0, 20.0, 11.0);
        assert_eq!(encode_box(&a, &a), BoxDeltas::zero());
    }

    #[test]
    fn decode_inverts_encode() {
        let a = b(3.0, 4.0, 20.0, 11.0);
        let g = b(-5.0, 2.5, 40.0, 9.0);
        let back = decode_box(&a, &encode_box(&a, &g)).unwrap();
        for (x, y) in back.to_array().iter().zip(g.to_array()) {
            assert_relative_eq!(*x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn decode_non_finite_errors() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let d = BoxDeltas { dx: 0.0, dy: 0.0, dw: 1e6, dh: 0.0 };
        assert!(matches!(decode_box(&a, &d), Err(Error::NonFiniteDecode(_))));
    }

    #[test]
    fn decode_clipped_stays_in_frame() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let d = BoxDeltas { dx: -1.0, dy: 0.0, dw: 1.0, dh: 0.0 };
        let out = decode_clipped(&a, &d, 20.0, 20.0).unwrap();
        assert_eq!(out.x_min, 0.0);
        assert!(out.x_max <= 20.0);
    }
}
