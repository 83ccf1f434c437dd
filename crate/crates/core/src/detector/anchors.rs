use serde::{Deserialize, Serialize};

use super::DetectorConfig;
use crate::geometry::{iou, BoundingBox};
use crate::scalar::Scalar;

/// Reference box tiled over the feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor<T> {
    pub bbox: BoundingBox<T>,
    pub cell_x: usize,
    pub cell_y: usize,
    /// Index among the anchors of one cell: `scale_index * n_ratios + ratio_index`.
    pub shape: usize,
}

/// All anchors for a `width x height` feature map, ordered by row, column,
/// then shape. Anchor `(x, y, a)` is centered at `((x + 0.5) s, (y + 0.5) s)`
/// with `s` the feature stride; scale `k` and ratio `r` give width `k / sqrt(r)`
/// and height `k sqrt(r)`. Anchors are not clipped.
pub fn generate_anchors<T: Scalar>(feature_dims: (usize, usize), config: &DetectorConfig) -> Vec<Anchor<T>> {
    let (fw, fh) = feature_dims;
    let stride = T::from_usize_lossy(config.feature_stride);
    let shapes: Vec<(T, T)> = config
        .anchor_scales
        .iter()
        .flat_map(|&s| {
            config.anchor_ratios.iter().map(move |&r| {
                let root = r.sqrt();
                (T::lit(s / root), T::lit(s * root))
            })
        })
        .collect();
    let mut out = Vec::with_capacity(fw * fh * shapes.len());
    let half = T::lit(0.5);
    for y in 0..fh {
        for x in 0..fw {
            let cx = (T::from_usize_lossy(x) + half) * stride;
            let cy = (T::from_usize_lossy(y) + half) * stride;
            for (a, &(w, h)) in shapes.iter().enumerate() {
                out.push(Anchor { bbox: BoundingBox::from_center(cx, cy, w, h), cell_x: x, cell_y: y, shape: a });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorAssignment<T> {
    pub labels: Vec<AnchorLabel>,
    /// Ground truth index each anchor matches best (meaningful for positives).
    pub matched: Vec<Option<usize>>,
    pub max_iou: Vec<T>,
}

/// Labels anchors against ground truth.
///
/// Positive when IoU with some box reaches `rpn_pos_iou`, or when the anchor
/// has the highest IoU for some box (ties included, zero overlap excluded).
/// Negative when the best IoU is below `rpn_neg_iou`; ignored otherwise.
pub fn assign_anchor_labels<T: Scalar>(
    anchors: &[Anchor<T>],
    gt: &[BoundingBox<T>],
    config: &DetectorConfig,
) -> AnchorAssignment<T> {
    let n = anchors.len();
    if gt.is_empty() {
        return AnchorAssignment { labels: vec![AnchorLabel::Negative; n], matched: vec![None; n], max_iou: vec![T::zero(); n] };
    }
    let pos = T::lit(config.rpn_pos_iou);
    let neg = T::lit(config.rpn_neg_iou);

    let mut overlaps = vec![T::zero(); n * gt.len()];
    let mut best_for_gt = vec![T::zero(); gt.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let v = iou(&a.bbox, g);
            overlaps[i * gt.len() + j] = v;
            if v > best_for_gt[j] {
                best_for_gt[j] = v;
            }
        }
    }

    let mut labels = vec![AnchorLabel::Ignore; n];
    let mut matched = vec![None; n];
    let mut max_iou = vec![T::zero(); n];
    for i in 0..n {
        let row = &overlaps[i * gt.len()..(i + 1) * gt.len()];
        let (j, best) = row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        max_iou[i] = best;
        matched[i] = Some(j);
        labels[i] = if best >= pos {
            AnchorLabel::Positive
        } else if best < neg {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    for (j, &best) in best_for_gt.iter().enumerate() {
        if best <= T::zero() {
            continue;
        }
        for i in 0..n {
            if overlaps[i * gt.len() + j] == best {
                labels[i] = AnchorLabel::Positive;
                matched[i] = Some(j);
            }
        }
    }
    AnchorAssignment { labels, matched, max_iou }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DetectorConfig {
        DetectorConfig::default()
    }

    #[test]
    fn count_formula() {
        let anchors = generate_anchors::<f64>((10, 10), &cfg());
        assert_eq!(anchors.len(), 900);
        assert_eq!(generate_anchors::<f64>((7, 3), &cfg()).len(), 7 * 3 * 9);
    }

    #[test]
    fn square_and_elongated_shapes() {
        let c = DetectorConfig { anchor_scales: vec![40.0], anchor_ratios: vec![1.0, 2.0], ..cfg() };
        let a = generate_anchors::<f64>((1, 1), &c);
        assert_eq!(a[0].bbox, BoundingBox::raw(-12.0, -12.0, 28.0, 28.0));
        let (w, h) = (a[1].bbox.width(), a[1].bbox.height());
        assert!((h / w - 2.0).abs() < 1e-6);
        assert!((w - 40.0 / 2f64.sqrt()).abs() < 1e-9);
        assert!((h - 40.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!((w * h - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn centers_on_stride_grid() {
        let a = generate_anchors::<f64>((3, 2), &cfg());
        let last = a.last().unwrap();
        assert_eq!((last.cell_x, last.cell_y, last.shape), (2, 1, 8));
        assert_eq!(last.bbox.center(), (40.0, 24.0));
    }

    #[test]
    fn no_gt_all_negative() {
        let anchors = generate_anchors::<f64>((4, 4), &cfg());
        let asg = assign_anchor_labels(&anchors, &[], &cfg());
        assert!(asg.labels.iter().all(|&l| l == AnchorLabel::Negative));
    }

    #[test]
    fn identical_anchor_is_positive() {
        let anchors = generate_anchors::<f64>((4, 4), &cfg());
        let gt = anchors[37].bbox;
        let asg = assign_anchor_labels(&anchors, &[gt], &cfg());
        assert_eq!(asg.labels[37], AnchorLabel::Positive);
        assert_eq!(asg.matched[37], Some(0));
    }

    /// Exhaustive oracle on a small grid: the argmax clause makes the best
    /// anchor positive even when its IoU is below `rpn_pos_iou`.
    #[test]
    fn low_overlap_best_anchor_still_positive() {
        let c = DetectorConfig { anchor_scales: vec![16.0], anchor_ratios: vec![1.0], ..cfg() };
        let anchors = generate_anchors::<f64>((3, 3), &c);
        // Anchor (1, 1) is [16, 16, 32, 32]; this 16x10 box overlaps it with IoU 0.4.
        let gt = BoundingBox::new(16.0, 16.0, 32.0, 22.4).unwrap();
        let ious: Vec<f64> = anchors.iter().map(|a| iou(&a.bbox, &gt)).collect();
        let best = ious.iter().cloned().fold(0.0, f64::max);
        assert!((best - 0.4).abs() < 1e-12);
        let asg = assign_anchor_labels(&anchors, &[gt], &c);
        for (i, v) in ious.iter().enumerate() {
            let expect = if *v == best {
                AnchorLabel::Positive
            } else if *v < c.rpn_neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            assert_eq!(asg.labels[i], expect, "anchor {i}");
        }
    }

    #[test]
    fn every_gt_gets_a_positive() {
        let anchors = generate_anchors::<f64>((6, 5), &cfg());
        let gts = [
            BoundingBox::new(3.0, 4.0, 9.0, 11.0).unwrap(),
            BoundingBox::new(50.0, 30.0, 90.0, 44.0).unwrap(),
            BoundingBox::new(10.0, 10.0, 95.0, 79.0).unwrap(),
        ];
        let asg = assign_anchor_labels(&anchors, &gts, &cfg());
        for j in 0..gts.len() {
            assert!(asg.labels.iter().zip(&asg.matched).any(|(l, m)| *l == AnchorLabel::Positive && *m == Some(j)));
        }
    }
}
