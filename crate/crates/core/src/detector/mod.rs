//! Two-stage detector: convolutional backbone, region proposal network,
//! bilinear ROI pooling and a box head, trained with SGD.
//!
//! Gradients are derived by hand for every layer and checked against
//! central finite differences in the tests.

mod anchors;
mod checkpoint;
mod config;
mod infer;
pub mod layers;
mod loss;
mod network;
mod propose;
mod train;

pub use anchors::{assign_anchor_labels, generate_anchors, Anchor, AnchorAssignment, AnchorLabel};
pub use checkpoint::{Checkpoint, CheckpointMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{BackboneDepth, DetectorConfig};
pub use infer::{infer, infer_rois};
pub use loss::{bce_with_logits, compute_losses, sigmoid, smooth_l1, ClsTerm, LossGrads, LossTerms, Losses, RegTerm};
pub use network::{AnchorSample, Detector, ForwardCache, ForwardOutput, HeadOutput, HeadSample, TrainingPlan, HEAD_DELTA_STD};
pub use propose::{max_log_scale, propose};
pub use train::{
    train, train_step_losses, LossRecord, LossSplit, TrainOptions, TrainOutcome, TrainSample,
};

use serde::{Deserialize, Serialize};

use crate::corpus::Side;
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal<T> {
    #[serde(rename = "box")]
    pub bbox: BoundingBox<T>,
    /// Objectness probability.
    pub score: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Roi,
    Panoramic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    #[serde(rename = "box")]
    pub bbox: BoundingBox<T>,
    pub confidence: T,
    pub frame: Frame,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
}
