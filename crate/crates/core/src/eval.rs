//! Image-level binary evaluation: confusion metrics at an operating
//! threshold, ROC sweep, trapezoidal AUC and its Hanley–McNeil inference.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::scalar::{total_cmp, Scalar};

/// z quantile of the two-sided 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage<T> {
    pub image_id: String,
    pub score: T,
    pub label: bool,
}

/// Reduces an image's detection confidences to one score: the maximum, or
/// zero when nothing was detected.
pub fn image_level_score<T: Scalar>(confidences: &[T]) -> T {
    confidences.iter().copied().fold(T::zero(), T::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `tp / (tp + fn)`, `None` without positives.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `tn / (tn + fp)`, `None` without negatives.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.n())
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Confusion counts with "positive" meaning `score >= threshold`.
pub fn confusion_at<T: Scalar>(scored: &[ScoredImage<T>], threshold: T) -> Confusion {
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for s in scored {
        match (s.score >= threshold, s.label) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points swept over every distinct score plus the `+inf`/`-inf`
/// sentinels, sorted by `(fpr, tpr)`, consecutive duplicates removed.
///
/// Fails unless both classes are present.
pub fn roc_curve<T: Scalar>(scored: &[ScoredImage<T>]) -> Result<Vec<RocPoint>> {
    let n_pos = scored.iter().filter(|s| s.label).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Stats(format!("ROC needs both classes (positives {n_pos}, negatives {n_neg})")));
    }
    let mut order: Vec<&ScoredImage<T>> = scored.iter().collect();
    order.sort_by(|a, b| total_cmp(b.score, a.score));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        // Lower the threshold to the next distinct score; all ties flip together.
        let t = order[i].score;
        while i < order.len() && order[i].score == t {
            if order[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / n_neg as f64, tpr: tp as f64 / n_pos as f64 });
    }
    points.push(RocPoint { fpr: 1.0, tpr: 1.0 });
    points.sort_by(|a, b| a.fpr.total_cmp(&b.fpr).then(a.tpr.total_cmp(&b.tpr)));
    points.dedup();
    Ok(points)
}

/// Trapezoidal area under a curve given in `(fpr, tpr)` order. Curves with
/// fewer than two points have the chance value 0.5.
pub fn auc(points: &[RocPoint]) -> f64 {
    if points.len() < 2 {
        return 0.5;
    }
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5).sum::<f64>().clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucInference {
    pub se: f64,
    pub ci95: (f64, f64),
    pub p_value: f64,
}

/// Hanley–McNeil standard error of an AUC estimated from `n_pos` positive
/// and `n_neg` negative cases.
pub fn hanley_mcneil_se(auc: f64, n_pos: usize, n_neg: usize) -> f64 {
    let (p, n) = (n_pos as f64, n_neg as f64);
    let q1 = auc / (2.0 - auc);
    let q2 = 2.0 * auc * auc / (1.0 + auc);
    let a2 = auc * auc;
    let var = (auc * (1.0 - auc) + (p - 1.0) * (q1 - a2) + (n - 1.0) * (q2 - a2)) / (p * n);
    var.max(0.0).sqrt()
}

/// Standard error, 95% interval and two-sided p-value against AUC = 0.5.
///
/// The interval uses the Hanley–McNeil error at the observed area and is
/// clamped to `[0, 1]`. The test statistic uses the same formula evaluated at
/// the null area 0.5, so a perfect separation (zero observed error) still
/// yields a finite z.
pub fn auc_inference(auc: f64, n_pos: usize, n_neg: usize) -> Result<AucInference> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Stats(format!("AUC inference needs both classes (positives {n_pos}, negatives {n_neg})")));
    }
    if !(0.0..=1.0).contains(&auc) {
        return Err(Error::Stats(format!("AUC {auc} outside [0, 1]")));
    }
    let se = hanley_mcneil_se(auc, n_pos, n_neg);
    let se_null = hanley_mcneil_se(0.5, n_pos, n_neg);
    let z = (auc - 0.5) / se_null;
    let normal = Normal::standard();
    let p_value = (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0);
    let ci95 = ((auc - Z_95 * se).max(0.0), (auc + Z_95 * se).min(1.0));
    Ok(AucInference { se, ci95, p_value })
}

/// Full image-level evaluation at one operating threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub roc_points: Vec<RocPoint>,
    pub auc: f64,
    pub auc_se: f64,
    pub ci95: (f64, f64),
    pub p_value: f64,
    pub scores: Vec<ScoredImage<f64>>,
    /// Fraction of positive images whose top detection overlaps a ground
    /// truth box with IoU >= 0.5; present when boxes were available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization_rate: Option<f64>,
}

pub fn build_report<T: Scalar>(scored: &[ScoredImage<T>], threshold: T) -> Result<EvalReport> {
    if scored.is_empty() {
        return Err(Error::Stats("cannot evaluate an empty set".into()));
    }
    let c = confusion_at(scored, threshold);
    let n_pos = c.tp + c.fn_;
    let n_neg = c.tn + c.fp;
    let roc_points = roc_curve(scored)?;
    let area = auc(&roc_points);
    let inf = auc_inference(area, n_pos, n_neg)?;
    Ok(EvalReport {
        threshold: threshold.as_f64(),
        n_pos,
        n_neg,
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        accuracy: c.accuracy(),
        roc_points,
        auc: area,
        auc_se: inf.se,
        ci95: inf.ci95,
        p_value: inf.p_value,
        scores: scored
            .iter()
            .map(|s| ScoredImage { image_id: s.image_id.clone(), score: s.score.as_f64(), label: s.label })
            .collect(),
        localization_rate: None,
    })
}

/// Draws the ROC curve with the chance diagonal into a square PNG.
pub fn write_roc_png(points: &[RocPoint], size: u32, path: &Path) -> Result<()> {
    let size = size.max(64);
    let margin = size / 10;
    let span = (size - 2 * margin) as f64;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let to_px = |p: RocPoint| (margin as f64 + p.fpr * span, (size - margin) as f64 - p.tpr * span);
    let corner = |fpr, tpr| to_px(RocPoint { fpr, tpr });

    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, corner(0.0, 0.0), corner(1.0, 0.0), axis);
    draw_line(&mut img, corner(0.0, 0.0), corner(0.0, 1.0), axis);
    draw_line(&mut img, corner(0.0, 0.0), corner(1.0, 1.0), Rgb([170, 170, 170]));
    for w in points.windows(2) {
        let (a, b) = (to_px(w[0]), to_px(w[1]));
        for off in [-1.0, 0.0, 1.0] {
            draw_line(&mut img, (a.0, a.1 + off), (b.0, b.1 + off), Rgb([200, 30, 30]));
        }
    }
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub(crate) fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}
