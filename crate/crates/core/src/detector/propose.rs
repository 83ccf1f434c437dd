use super::{Anchor, DetectorConfig, Proposal};
use crate::geometry::{decode_box, nms_indices, score_order, BoxDeltas, Scored};
use crate::scalar::Scalar;

/// Upper bound applied to predicted log-size deltas before decoding.
pub fn max_log_scale() -> f64 {
    (1000.0f64 / 16.0).ln()
}

pub(crate) fn clamp_deltas<T: Scalar>(d: BoxDeltas<T>) -> BoxDeltas<T> {
    let m = T::lit(max_log_scale());
    BoxDeltas { dw: d.dw.min(m), dh: d.dh.min(m), ..d }
}

/// Turns dense RPN outputs into proposals: decode every anchor, clip to the
/// `width x height` frame, drop boxes with a side below `min_proposal_side`,
/// keep the `proposals_pre_nms` best, suppress at `nms_iou_proposals` and
/// return at most `proposals_post_nms`.
///
/// `objectness` holds probabilities and `deltas` regressions, both in anchor
/// order.
pub fn propose<T: Scalar>(
    objectness: &[T],
    deltas: &[BoxDeltas<T>],
    anchors: &[Anchor<T>],
    frame: (usize, usize),
    config: &DetectorConfig,
) -> Vec<Proposal<T>> {
    let (w, h) = (T::from_usize_lossy(frame.0), T::from_usize_lossy(frame.1));
    let min_side = T::lit(config.min_proposal_side);
    let mut items: Vec<Scored<T>> = anchors
        .iter()
        .zip(objectness.iter().zip(deltas))
        .filter_map(|(a, (&p, d))| {
            let b = decode_box(&a.bbox, &clamp_deltas(*d)).ok()?.clip(w, h);
            (b.width() >= min_side && b.height() >= min_side).then_some(Scored::new(b, p))
        })
        .collect();
    items.sort_by(score_order);
    items.truncate(config.proposals_pre_nms);
    nms_indices(&items, T::lit(config.nms_iou_proposals))
        .into_iter()
        .take(config.proposals_post_nms)
        .map(|i| Proposal { bbox: items[i].bbox, score: items[i].score })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::generate_anchors;
    use crate::geometry::{decode_box, iou};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_and_single() {
        let c = DetectorConfig::default();
        assert!(propose::<f64>(&[], &[], &[], (64, 64), &c).is_empty());
        let c1 = DetectorConfig { anchor_scales: vec![32.0], anchor_ratios: vec![1.0], ..c };
        let anchors = generate_anchors::<f64>((1, 1), &c1);
        let p = propose(&[0.7], &[BoxDeltas::zero()], &anchors, (64, 64), &c1);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].bbox.to_array(), [0.0, 0.0, 24.0, 24.0]);
        assert_eq!(p[0].score, 0.7);
    }

    /// Composed oracle: decode, clip, filter, full sort, brute-force greedy
    /// suppression, truncate.
    #[test]
    fn matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = DetectorConfig { proposals_pre_nms: 60, proposals_post_nms: 15, ..Default::default() };
        let anchors = generate_anchors::<f64>((5, 4), &c);
        let frame = (80usize, 64usize);
        for _ in 0..20 {
            let obj: Vec<f64> = anchors.iter().map(|_| rng.random::<f64>()).collect();
            let del: Vec<BoxDeltas<f64>> = anchors
                .iter()
                .map(|_| BoxDeltas {
                    dx: rng.random_range(-0.5..0.5),
                    dy: rng.random_range(-0.5..0.5),
                    dw: rng.random_range(-2.0..1.0),
                    dh: rng.random_range(-2.0..1.0),
                })
                .collect();
            let got = propose(&obj, &del, &anchors, frame, &c);

            let mut cand: Vec<(f64, [f64; 4])> = Vec::new();
            for i in 0..anchors.len() {
                let b = decode_box(&anchors[i].bbox, &del[i]).unwrap().clip(80.0, 64.0);
                if b.width() >= 1.0 && b.height() >= 1.0 {
                    cand.push((obj[i], b.to_array()));
                }
            }
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1[0].total_cmp(&b.1[0])).then(a.1[1].total_cmp(&b.1[1])));
            cand.truncate(60);
            let mut kept: Vec<(f64, [f64; 4])> = Vec::new();
            for (s, b) in cand {
                let bb = crate::geometry::BoundingBox::raw(b[0], b[1], b[2], b[3]);
                if kept.iter().all(|(_, k)| iou(&crate::geometry::BoundingBox::raw(k[0], k[1], k[2], k[3]), &bb) <= 0.7) {
                    kept.push((s, b));
                }
            }
            kept.truncate(15);
            assert_eq!(got.len(), kept.len());
            for (p, (s, b)) in got.iter().zip(&kept) {
                assert_eq!(p.score, *s);
                assert_eq!(p.bbox.to_array(), *b);
            }
        }
    }

    #[test]
    fn huge_deltas_are_clamped() {
        let c = DetectorConfig { anchor_scales: vec![32.0], anchor_ratios: vec![1.0], ..Default::default() };
        let anchors = generate_anchors::<f32>((2, 2), &c);
        let del = vec![BoxDeltas { dx: 0.0, dy: 0.0, dw: 1e6, dh: 1e6 }; 4];
        let p = propose(&[0.5f32; 4], &del, &anchors, (32, 32), &c);
        assert!(!p.is_empty());
        assert!(p.iter().all(|q| q.bbox.to_array().iter().all(|v| v.is_finite())));
    }
}
