//! Stage composition shared by the command line and the service: turning a
//! corpus split into ROI training samples, and evaluating a detector on a
//! held-out split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_rois, Corpus, PixelBox, RoiSpec, Side};
use crate::detector::{infer, Detection, Detector, TrainSample};
use crate::error::{Error, Result};
use crate::eval::{build_report, image_level_score, EvalReport, ScoredImage};
use crate::geometry::iou;
use crate::scalar::Scalar;

/// Minimum IoU between the top detection and a ground truth box for a
/// positive image to count as localized.
pub const LOCALIZATION_IOU: f64 = 0.5;

/// Both ROI crops of every listed image, with consensus boxes in crop
/// coordinates. Sample ids are `"{image_id}:{side}"`.
pub fn roi_samples(corpus: &Corpus, ids: &[String], spec: &RoiSpec) -> Result<Vec<TrainSample>> {
    let per_image: Vec<Vec<TrainSample>> = ids
        .par_iter()
        .map(|id| {
            let image_ref = corpus.image(id).ok_or_else(|| Error::Validation(format!("unknown image id {id:?}")))?;
            let image = image_ref.load()?;
            let annotation = corpus.consensus_for(id);
            Ok(extract_rois(&image, spec, &annotation)
                .into_iter()
                .map(|r| TrainSample { id: format!("{}:{}", id, r.side.as_str()), raster: r.raster, boxes: r.boxes })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Scoring unit for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalUnit {
    /// One score per panoramic image.
    #[default]
    Image,
    /// One score per ROI side; a side is positive when it holds a box.
    Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub has_acp: bool,
    pub detections: Vec<Detection<f64>>,
    /// Whether the top detection overlaps a ground truth box; `None` for
    /// negative images.
    pub localized: Option<bool>,
}

/// Runs inference on `ids`, scores each unit by its highest confidence, and
/// builds the report at `threshold`. Inference runs in parallel; results are
/// collected in `ids` order.
pub fn evaluate<T: Scalar>(
    detector: &Detector<T>,
    corpus: &Corpus,
    ids: &[String],
    spec: &RoiSpec,
    threshold: f64,
    unit: EvalUnit,
) -> Result<(EvalReport, Vec<ImageResult>)> {
    if ids.is_empty() {
        return Err(Error::Stats("evaluation split is empty".into()));
    }
    let results: Vec<ImageResult> = ids
        .par_iter()
        .map(|id| {
            let image_ref = corpus.image(id).ok_or_else(|| Error::Validation(format!("unknown image id {id:?}")))?;
            let image = image_ref.load()?;
            let truth = corpus.consensus_for(id);
            let detections: Vec<Detection<f64>> = infer(detector, &image, spec, 0.0)?
                .into_iter()
                .map(|d| Detection { bbox: d.bbox.cast(), confidence: d.confidence.as_f64(), frame: d.frame, side: d.side })
                .collect();
            let localized = truth.has_acp().then(|| {
                detections.first().is_some_and(|top| truth.boxes.iter().any(|g| iou(&top.bbox, g) >= LOCALIZATION_IOU))
            });
            Ok(ImageResult { image_id: id.clone(), has_acp: truth.has_acp(), detections, localized })
        })
        .collect::<Result<_>>()?;

    let scored: Vec<ScoredImage<f64>> = match unit {
        EvalUnit::Image => results
            .iter()
            .map(|r| ScoredImage {
                image_id: r.image_id.clone(),
                score: image_level_score(&r.detections.iter().map(|d| d.confidence).collect::<Vec<_>>()),
                label: r.has_acp,
            })
            .collect(),
        EvalUnit::Side => {
            let mut out = Vec::new();
            for r in &results {
                let image_ref = corpus.image(&r.image_id).expect("checked above");
                let truth = corpus.consensus_for(&r.image_id);
                for side in Side::BOTH {
                    let on_side = |b: &PixelBox| Side::of_box(b, image_ref.width as f64) == side;
                    let conf: Vec<f64> = r.detections.iter().filter(|d| d.side == Some(side)).map(|d| d.confidence).collect();
                    out.push(ScoredImage {
                        image_id: format!("{}:{}", r.image_id, side.as_str()),
                        score: image_level_score(&conf),
                        label: truth.boxes.iter().any(on_side),
                    });
                }
            }
            out
        }
    };
    let mut report = build_report(&scored, threshold)?;
    let positives: Vec<bool> = results.iter().filter_map(|r| r.localized).collect();
    if !positives.is_empty() {
        report.localization_rate = Some(positives.iter().filter(|&&l| l).count() as f64 / positives.len() as f64);
    }
    Ok((report, results))
}
