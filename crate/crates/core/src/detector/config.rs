use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneDepth {
    /// Four stride-2 conv blocks; trains on a CPU in minutes.
    Small,
    /// Same four stages with residual blocks stacked to ResNet-101 depth
    /// (3, 4, 23, 3 blocks per stage).
    Deep,
}

impl BackboneDepth {
    pub fn residual_blocks(self) -> [usize; 4] {
        match self {
            BackboneDepth::Small => [0; 4],
            BackboneDepth::Deep => [3, 4, 23, 3],
        }
    }
}

/// Network shape, target assignment, sampling and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub backbone_depth: BackboneDepth,
    /// Output channels of the four backbone stages.
    pub backbone_channels: [usize; 4],
    pub rpn_channels: usize,
    pub head_hidden: usize,

    pub anchor_scales: Vec<f64>,
    /// Height over width.
    pub anchor_ratios: Vec<f64>,
    pub feature_stride: usize,

    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,

    pub nms_iou_proposals: f64,
    pub nms_iou_final: f64,
    pub proposals_pre_nms: usize,
    pub proposals_post_nms: usize,
    pub min_proposal_side: f64,

    pub head_fg_iou: f64,
    pub head_batch: usize,
    pub head_fg_fraction: f64,
    pub roi_pool_size: usize,

    pub rpn_smooth_l1_beta: f64,
    pub head_smooth_l1_beta: f64,
    /// Weights of `rpn_cls`, `rpn_reg`, `head_cls`, `head_reg` in the total.
    pub loss_weights: [f64; 4],

    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub val_interval: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone_depth: BackboneDepth::Small,
            backbone_channels: [8, 16, 32, 32],
            rpn_channels: 32,
            head_hidden: 64,
            anchor_scales: vec![32.0, 64.0, 128.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            feature_stride: 16,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            nms_iou_proposals: 0.7,
            nms_iou_final: 0.3,
            proposals_pre_nms: 1000,
            proposals_post_nms: 100,
            min_proposal_side: 1.0,
            head_fg_iou: 0.5,
            head_batch: 32,
            head_fg_fraction: 0.25,
            roi_pool_size: 7,
            rpn_smooth_l1_beta: 1.0 / 9.0,
            head_smooth_l1_beta: 1.0,
            loss_weights: [1.0; 4],
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip_norm: 10.0,
            batch_size: 4,
            iterations: 2000,
            val_interval: 50,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return fail("anchor_scales and anchor_ratios must be non-empty".into());
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|v| !(v.is_finite() && *v > 0.0)) {
            return fail("anchor scales and ratios must be positive".into());
        }
        if !(0.0 < self.rpn_neg_iou && self.rpn_neg_iou < self.rpn_pos_iou && self.rpn_pos_iou <= 1.0) {
            return fail(format!(
                "need 0 < rpn_neg_iou ({}) < rpn_pos_iou ({}) <= 1",
                self.rpn_neg_iou, self.rpn_pos_iou
            ));
        }
        for (name, v) in [
            ("nms_iou_proposals", self.nms_iou_proposals),
            ("nms_iou_final", self.nms_iou_final),
            ("head_fg_iou", self.head_fg_iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        for (name, v) in [("rpn_pos_fraction", self.rpn_pos_fraction), ("head_fg_fraction", self.head_fg_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.feature_stride != 16 {
            return fail(format!("feature_stride must be 16 for the four stride-2 stages, got {}", self.feature_stride));
        }
        let sizes = [
            ("rpn_channels", self.rpn_channels),
            ("head_hidden", self.head_hidden),
            ("roi_pool_size", self.roi_pool_size),
            ("batch_size", self.batch_size),
            ("rpn_batch", self.rpn_batch),
            ("head_batch", self.head_batch),
            ("proposals_pre_nms", self.proposals_pre_nms),
            ("proposals_post_nms", self.proposals_post_nms),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if self.backbone_channels.contains(&0) {
            return fail("backbone_channels must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return fail("momentum must lie in [0, 1) and weight_decay be >= 0".into());
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return fail("loss_weights must be non-negative".into());
        }
        if !(self.rpn_smooth_l1_beta > 0.0 && self.head_smooth_l1_beta > 0.0) {
            return fail("smooth L1 betas must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = DetectorConfig::default();
        c.validate().unwrap();
        assert_eq!(c.anchors_per_cell(), 9);
    }

    #[test]
    fn iou_ordering_enforced() {
        let c = DetectorConfig { rpn_neg_iou: 0.7, rpn_pos_iou: 0.3, ..Default::default() };
        assert!(c.validate().is_err());
        let c = DetectorConfig { nms_iou_final: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = DetectorConfig { anchor_scales: vec![], ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<DetectorConfig>(r#"{"anchor_sizes":[1]}"#).is_err());
        let c: DetectorConfig = serde_json::from_str(r#"{"iterations":5}"#).unwrap();
        assert_eq!(c.iterations, 5);
    }
}
