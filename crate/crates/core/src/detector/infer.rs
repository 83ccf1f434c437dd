use super::{Detection, Detector, Frame};
use crate::corpus::{extract_rois, Annotation, PanoramicImage, RoiSample, RoiSpec};
use crate::error::Result;
use crate::geometry::{nms_indices, Scored};
use crate::scalar::Scalar;

/// Runs the detector on both ROI crops. Returns each crop with its
/// unthresholded detections in crop coordinates.
pub fn infer_rois<T: Scalar>(
    detector: &Detector<T>,
    image: &PanoramicImage,
    spec: &RoiSpec,
) -> Result<Vec<(RoiSample, Vec<Detection<T>>)>> {
    extract_rois(image, spec, &Annotation::normal(image.id.clone()))
        .into_iter()
        .map(|roi| {
            let dets = detector.detect(&roi.raster.cast())?;
            Ok((roi, dets))
        })
        .collect()
}

/// Detections in the panoramic frame: both crops, projected back, final
/// suppression, then the `score_threshold` cut. Sorted by descending
/// confidence.
pub fn infer<T: Scalar>(
    detector: &Detector<T>,
    image: &PanoramicImage,
    spec: &RoiSpec,
    score_threshold: f64,
) -> Result<Vec<Detection<T>>> {
    let mut all = Vec::new();
    for (roi, dets) in infer_rois(detector, image, spec)? {
        let (dx, dy) = (T::lit(roi.region.x_min), T::lit(roi.region.y_min));
        all.extend(dets.into_iter().map(|d| Detection {
            bbox: d.bbox.translate(dx, dy),
            confidence: d.confidence,
            frame: Frame::Panoramic,
            side: Some(roi.side),
        }));
    }
    let scored: Vec<Scored<T>> = all.iter().map(|d| Scored::new(d.bbox, d.confidence)).collect();
    let threshold = T::lit(score_threshold);
    Ok(nms_indices(&scored, T::lit(detector.config().nms_iou_final))
        .into_iter()
        .map(|i| all[i])
        .filter(|d| d.confidence >= threshold)
        .collect())
}
