use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::ParamSet;
use super::{Checkpoint, CheckpointMetadata, Detector, DetectorConfig, Losses};
use crate::augment::{augment_one, AugmentConfig};
use crate::corpus::PixelBox;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, item_rng};

const ORDER_STREAM: u64 = 0x006f_7264_6572;
const PLAN_STREAM: u64 = 0x706c_616e;
const VAL_STREAM: u64 = 0x0076_616c;

/// One ROI crop with its boxes in crop coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub raster: Raster<f32>,
    pub boxes: Vec<PixelBox>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOptions {
    pub augment: AugmentConfig,
    /// Compute per-sample gradients on the calling thread only. Results are
    /// identical either way; gradients are always reduced in batch order.
    pub serial: bool,
    pub split_seed: Option<u64>,
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSplit {
    Train,
    Val,
}

/// One row of the loss curve. Train rows hold the batch mean before the
/// update of that step; val rows the mean over the validation crops after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub split: LossSplit,
    pub losses: Losses<f64>,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,rpn_cls,rpn_reg,head_cls,head_reg,total,split";

    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let split = match self.split {
            LossSplit::Train => "train",
            LossSplit::Val => "val",
        };
        format!("{},{},{},{},{},{},{}", self.step, l.rpn_cls, l.rpn_reg, l.head_cls, l.head_reg, l.total, split)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRecord>,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from(LossRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.curve {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

fn cast_boxes<T: Scalar>(boxes: &[PixelBox]) -> Vec<crate::geometry::BoundingBox<T>> {
    boxes.iter().map(|b| b.cast()).collect()
}

fn sample_loss_grad<T: Scalar>(
    det: &Detector<T>,
    raster: &Raster<T>,
    boxes: &[crate::geometry::BoundingBox<T>],
    plan_rng: &mut ChaCha8Rng,
) -> Result<(Losses<T>, ParamSet<T>)> {
    let cache = det.forward_cache(raster)?;
    let plan = det.make_plan(&cache, boxes, plan_rng);
    Ok(det.loss_and_grad(&cache, &plan))
}

/// Mean losses over un-augmented samples, with plans drawn from a fixed
/// stream so that repeated calls on the same weights agree.
pub fn train_step_losses<T: Scalar>(det: &Detector<T>, samples: &[TrainSample], seed: u64, serial: bool) -> Result<Losses<T>> {
    let one = |(i, s): (usize, &TrainSample)| -> Result<Losses<T>> {
        let cache = det.forward_cache(&s.raster.cast())?;
        let plan = det.make_plan(&cache, &cast_boxes(&s.boxes), &mut item_rng(derive_seed(seed, VAL_STREAM), i as u64));
        Ok(det.losses(&cache, &plan))
    };
    let per: Vec<Losses<T>> = if serial {
        samples.iter().enumerate().map(one).collect::<Result<_>>()?
    } else {
        samples.par_iter().enumerate().map(one).collect::<Result<_>>()?
    };
    let mut sum = Losses::zero();
    per.iter().for_each(|l| sum.add(l));
    Ok(sum.scaled(T::one() / T::from_usize_lossy(per.len().max(1))))
}

fn now_unix() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// SGD with momentum over shuffled mini-batches of lazily augmented crops.
///
/// Each step draws `batch_size` (sample, augmentation) pairs from a seeded
/// permutation, averages the per-sample gradients, adds weight decay, clips
/// the global norm, and applies `v = momentum v + g; w -= lr v`. The
/// validation loss is measured every `val_interval` steps and at the last
/// step; the returned weights are those with the lowest validation loss, or
/// the final weights without a validation set.
pub fn train<T: Scalar>(
    train: &[TrainSample],
    val: &[TrainSample],
    config: &DetectorConfig,
    options: &TrainOptions,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    options.augment.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let mut det = Detector::<T>::new(config.clone())?;
    let mut velocity = det.params().zeros_like();
    let per_sample = options.augment.per_sample_count.max(1);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, ORDER_STREAM));
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut cursor = 0;

    let lr = T::lit(config.learning_rate);
    let mu = T::lit(config.momentum);
    let wd = T::lit(config.weight_decay);
    let clip = T::lit(config.grad_clip_norm);

    let mut curve = Vec::new();
    let mut best: Option<(T, usize, ParamSet<T>)> = None;
    let mut last = None;

    for step in 1..=config.iterations {
        let batch: Vec<(usize, usize)> = (0..config.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order = (0..train.len()).flat_map(|s| (0..per_sample).map(move |a| (s, a))).collect();
                    order.shuffle(&mut order_rng);
                    cursor = 0;
                }
                cursor += 1;
                order[cursor - 1]
            })
            .collect();

        let plan_seed = derive_seed(config.seed ^ PLAN_STREAM, step as u64);
        let one = |(b, &(s, a)): (usize, &(usize, usize))| -> Result<(Losses<T>, ParamSet<T>)> {
            let src = &train[s];
            let aug = augment_one(
                &src.id,
                &src.raster.cast::<T>(),
                &cast_boxes::<T>(&src.boxes),
                &options.augment,
                derive_seed(config.seed, s as u64),
                a as u64,
            );
            sample_loss_grad(&det, &aug.raster, &aug.boxes, &mut item_rng(plan_seed, b as u64))
        };
        let results: Vec<(Losses<T>, ParamSet<T>)> = if options.serial {
            batch.iter().enumerate().map(one).collect::<Result<_>>()?
        } else {
            batch.par_iter().enumerate().map(one).collect::<Result<_>>()?
        };

        let inv = T::one() / T::from_usize_lossy(results.len());
        let mut losses = Losses::zero();
        let mut grad = det.params().zeros_like();
        for (l, g) in &results {
            losses.add(l);
            grad.add_scaled(g, inv);
        }
        let losses = losses.scaled(inv);
        if !losses.is_finite() || !grad.all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "rpn_cls={} rpn_reg={} head_cls={} head_reg={} total={}",
                    losses.rpn_cls, losses.rpn_reg, losses.head_cls, losses.head_reg, losses.total
                ),
            });
        }
        let record = LossRecord { step, split: LossSplit::Train, losses: losses.to_f64() };
        progress(&record);
        curve.push(record);
        last = Some(losses.to_f64());

        grad.add_scaled(det.params(), wd);
        let norm = grad.l2_norm();
        if norm > clip {
            grad.scale(clip / norm);
        }
        velocity.scale(mu);
        velocity.add_scaled(&grad, T::one());
        det.params_mut().add_scaled(&velocity, -lr);

        let validate = !val.is_empty() && (step % config.val_interval.max(1) == 0 || step == config.iterations);
        if validate {
            let vl = train_step_losses(&det, val, config.seed, options.serial)?;
            let record = LossRecord { step, split: LossSplit::Val, losses: vl.to_f64() };
            progress(&record);
            curve.push(record);
            if vl.total.is_finite() && best.as_ref().is_none_or(|(b, _, _)| vl.total < *b) {
                best = Some((vl.total, step, det.params().clone()));
            }
        }
    }

    let (best_step, best_val_loss) = match best {
        Some((loss, step, params)) => {
            *det.params_mut() = params;
            (Some(step), Some(loss.as_f64()))
        }
        None => (None, None),
    };
    let metadata = CheckpointMetadata {
        iterations_run: config.iterations,
        final_losses: last,
        best_step,
        best_val_loss,
        split_seed: options.split_seed,
        created_unix: now_unix(),
    };
    Ok(TrainOutcome { checkpoint: Checkpoint::from_detector(&det, metadata), curve })
}
