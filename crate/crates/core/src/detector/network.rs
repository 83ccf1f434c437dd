use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{relu_backward_inplace, relu_inplace, roi_pool, roi_pool_backward, Conv2d, FeatureMap, Linear, ParamSet, Tensor};
use super::loss::{compute_losses, sigmoid, ClsTerm, LossTerms, Losses, RegTerm};
use super::propose::{clamp_deltas, propose};
use super::{assign_anchor_labels, generate_anchors, Anchor, AnchorLabel, Detection, DetectorConfig, Frame, Proposal};
use crate::error::{Error, Result};
use crate::geometry::{decode_box, encode_box, iou, nms_indices, BoundingBox, BoxDeltas, Scored};
use crate::raster::Raster;
use crate::scalar::Scalar;

/// The head regresses deltas divided by these factors.
pub const HEAD_DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    down: Conv2d,
    blocks: Vec<[Conv2d; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stages: Vec<Stage>,
    rpn_conv: Conv2d,
    rpn_cls: Conv2d,
    rpn_reg: Conv2d,
    fc: Linear,
    cls: Linear,
    reg: Linear,
}

#[derive(Clone, Copy)]
enum Init {
    He,
    Std(f64),
}

struct Builder<'a> {
    params: ParamSet<f64>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, shape: Vec<usize>, fan_in: usize, init: Init) -> usize {
        let mut t = Tensor::zeros(name, shape);
        if let Some(rng) = self.rng.as_deref_mut() {
            let std = match init {
                Init::He => (2.0 / fan_in as f64).sqrt(),
                Init::Std(s) => s,
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            t.data.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        self.params.push(t)
    }

    fn bias(&mut self, name: String, n: usize) -> usize {
        self.params.push(Tensor::zeros(name, vec![n]))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, init: Init) -> Conv2d {
        let weight = self.tensor(format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k, init);
        let bias = self.bias(format!("{name}.bias"), cout);
        Conv2d { weight, bias, in_channels: cin, out_channels: cout, kernel: k, stride, padding: k / 2 }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, init: Init) -> Linear {
        let weight = self.tensor(format!("{name}.weight"), vec![fout, fin], fin, init);
        let bias = self.bias(format!("{name}.bias"), fout);
        Linear { weight, bias, in_features: fin, out_features: fout }
    }
}

fn build(config: &DetectorConfig, rng: Option<&mut ChaCha8Rng>) -> (Layout, ParamSet<f64>) {
    let mut b = Builder { params: ParamSet::new(), rng };
    let mut cin = 1;
    let mut stages = Vec::new();
    for (s, (&cout, &n_blocks)) in
        config.backbone_channels.iter().zip(&config.backbone_depth.residual_blocks()).enumerate()
    {
        let down = b.conv(&format!("backbone.{s}.down"), cin, cout, 3, 2, Init::He);
        let blocks = (0..n_blocks)
            .map(|k| {
                [
                    b.conv(&format!("backbone.{s}.block{k}.conv1"), cout, cout, 3, 1, Init::He),
                    b.conv(&format!("backbone.{s}.block{k}.conv2"), cout, cout, 3, 1, Init::He),
                ]
            })
            .collect();
        stages.push(Stage { down, blocks });
        cin = cout;
    }
    let a = config.anchors_per_cell();
    let rc = config.rpn_channels;
    let rpn_conv = b.conv("rpn.conv", cin, rc, 3, 1, Init::He);
    let rpn_cls = b.conv("rpn.cls", rc, a, 1, 1, Init::Std(0.01));
    let rpn_reg = b.conv("rpn.reg", rc, 4 * a, 1, 1, Init::Std(0.01));
    let pooled = cin * config.roi_pool_size * config.roi_pool_size;
    let fc = b.linear("head.fc", pooled, config.head_hidden, Init::He);
    let cls = b.linear("head.cls", config.head_hidden, 1, Init::Std(0.01));
    let reg = b.linear("head.reg", config.head_hidden, 4, Init::Std(0.001));
    (Layout { stages, rpn_conv, rpn_cls, rpn_reg, fc, cls, reg }, b.params)
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    down: FeatureMap<T>,
    /// `(hidden, output)` of each residual block, both after ReLU.
    blocks: Vec<(FeatureMap<T>, FeatureMap<T>)>,
}

impl<T> StageCache<T> {
    fn output(&self) -> &FeatureMap<T> {
        self.blocks.last().map(|b| &b.1).unwrap_or(&self.down)
    }
}

/// Activations of one forward pass through backbone and RPN.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input: FeatureMap<T>,
    stages: Vec<StageCache<T>>,
    rpn_hidden: FeatureMap<T>,
    /// Objectness logits, `A x h x w`.
    pub rpn_logits: FeatureMap<T>,
    /// Anchor deltas, `4A x h x w`.
    pub rpn_deltas: FeatureMap<T>,
    pub anchors: Vec<Anchor<T>>,
    /// Input `(width, height)`.
    pub frame: (usize, usize),
}

impl<T: Scalar> ForwardCache<T> {
    pub fn features(&self) -> &FeatureMap<T> {
        self.stages.last().expect("at least one stage").output()
    }

    /// Logit of anchor `i` in anchor order.
    pub fn anchor_logit(&self, i: usize, a_per_cell: usize) -> T {
        let (cell, a) = (i / a_per_cell, i % a_per_cell);
        let w = self.rpn_logits.width;
        self.rpn_logits.at(a, cell / w, cell % w)
    }

    pub fn anchor_deltas(&self, i: usize, a_per_cell: usize) -> BoxDeltas<T> {
        let (cell, a) = (i / a_per_cell, i % a_per_cell);
        let w = self.rpn_deltas.width;
        let (y, x) = (cell / w, cell % w);
        BoxDeltas::from_array([0, 1, 2, 3].map(|k| self.rpn_deltas.at(4 * a + k, y, x)))
    }
}

/// Head result for one ROI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput<T> {
    pub roi: BoundingBox<T>,
    /// ACP probability.
    pub score: T,
    /// Refinement relative to `roi`, already multiplied by [`HEAD_DELTA_STD`].
    pub deltas: BoxDeltas<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Objectness probabilities, `A x h x w`.
    pub objectness: FeatureMap<T>,
    pub rpn_deltas: FeatureMap<T>,
    pub proposals: Vec<Proposal<T>>,
    pub head: Vec<HeadOutput<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSample<T> {
    pub index: usize,
    pub positive: bool,
    pub target: Option<[T; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSample<T> {
    pub roi: BoundingBox<T>,
    pub positive: bool,
    /// Normalized by [`HEAD_DELTA_STD`].
    pub target: Option<[T; 4]>,
}

/// Sampled anchors and ROIs with their targets. With the plan fixed, the loss
/// is a smooth function of the weights almost everywhere.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingPlan<T> {
    pub anchors: Vec<AnchorSample<T>>,
    pub rois: Vec<HeadSample<T>>,
}

struct HeadCache<T> {
    pooled: Vec<T>,
    hidden: Vec<T>,
    logit: T,
    reg: Vec<T>,
}

/// Detector weights together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector<T> {
    config: DetectorConfig,
    layout: Layout,
    params: ParamSet<T>,
}

impl<T: Scalar> Detector<T> {
    /// Random initialization seeded by `config.seed`.
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (layout, params) = build(&config, Some(&mut rng));
        Ok(Self { config, layout, params: params.cast() })
    }

    /// Rebuilds the network from a configuration and matching named tensors.
    pub fn from_params(config: DetectorConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let (layout, template) = build(&config, None);
        if template.tensors.len() != params.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.tensors.len(),
                params.tensors.len()
            )));
        }
        for (want, got) in template.tensors.iter().zip(&params.tensors) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    want.name, want.shape, got.name, got.shape
                )));
            }
            if got.data.len() != got.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor {} has wrong length", got.name)));
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector { config: self.config.clone(), layout: self.layout.clone(), params: self.params.cast() }
    }

    /// Feature map `(width, height)` for an input of the given size.
    pub fn feature_dims(&self, width: usize, height: usize) -> (usize, usize) {
        self.layout.stages.iter().fold((width, height), |(w, h), s| {
            let (ho, wo) = s.down.out_dims(h, w);
            (wo, ho)
        })
    }

    pub fn forward_cache(&self, raster: &Raster<T>) -> Result<ForwardCache<T>> {
        let (w, h) = (raster.width(), raster.height());
        let stride = self.config.feature_stride;
        if w < stride || h < stride {
            return Err(Error::RasterTooSmall { width: w, height: h, stride });
        }
        let half = T::lit(0.5);
        let input = FeatureMap { channels: 1, height: h, width: w, data: raster.data().iter().map(|&v| v - half).collect() };
        let p = &self.params;
        let mut stages: Vec<StageCache<T>> = Vec::with_capacity(self.layout.stages.len());
        for stage in &self.layout.stages {
            let x = stages.last().map(|s| s.output()).unwrap_or(&input);
            let mut down = stage.down.forward(p, x);
            relu_inplace(&mut down);
            let mut blocks: Vec<(FeatureMap<T>, FeatureMap<T>)> = Vec::with_capacity(stage.blocks.len());
            for [c1, c2] in &stage.blocks {
                let x = blocks.last().map(|b| &b.1).unwrap_or(&down);
                let mut mid = c1.forward(p, x);
                relu_inplace(&mut mid);
                let mut out = c2.forward(p, &mid);
                for (o, &skip) in out.data.iter_mut().zip(&x.data) {
                    *o += skip;
                }
                relu_inplace(&mut out);
                blocks.push((mid, out));
            }
            stages.push(StageCache { down, blocks });
        }
        let feat = stages.last().expect("four stages").output();
        let mut rpn_hidden = self.layout.rpn_conv.forward(p, feat);
        relu_inplace(&mut rpn_hidden);
        let rpn_logits = self.layout.rpn_cls.forward(p, &rpn_hidden);
        let rpn_deltas = self.layout.rpn_reg.forward(p, &rpn_hidden);
        let anchors = generate_anchors((feat.width, feat.height), &self.config);
        Ok(ForwardCache { input, stages, rpn_hidden, rpn_logits, rpn_deltas, anchors, frame: (w, h) })
    }

    /// Proposals from the RPN outputs held in `cache`.
    pub fn proposals(&self, cache: &ForwardCache<T>) -> Vec<Proposal<T>> {
        let a = self.config.anchors_per_cell();
        let n = cache.anchors.len();
        let obj: Vec<T> = (0..n).map(|i| sigmoid(cache.anchor_logit(i, a))).collect();
        let del: Vec<BoxDeltas<T>> = (0..n).map(|i| cache.anchor_deltas(i, a)).collect();
        propose(&obj, &del, &cache.anchors, cache.frame, &self.config)
    }

    fn head_forward(&self, feat: &FeatureMap<T>, roi: &BoundingBox<T>) -> HeadCache<T> {
        let p = &self.params;
        let pooled = roi_pool(feat, roi, self.config.feature_stride, self.config.roi_pool_size);
        let mut hidden = self.layout.fc.forward(p, &pooled);
        hidden.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let logit = self.layout.cls.forward(p, &hidden)[0];
        let reg = self.layout.reg.forward(p, &hidden);
        HeadCache { pooled, hidden, logit, reg }
    }

    pub fn head(&self, cache: &ForwardCache<T>, rois: &[BoundingBox<T>]) -> Vec<HeadOutput<T>> {
        let std = HEAD_DELTA_STD.map(T::lit);
        rois.iter()
            .map(|roi| {
                let h = self.head_forward(cache.features(), roi);
                let d = [0, 1, 2, 3].map(|k| h.reg[k] * std[k]);
                HeadOutput { roi: *roi, score: sigmoid(h.logit), deltas: BoxDeltas::from_array(d) }
            })
            .collect()
    }

    pub fn forward(&self, raster: &Raster<T>) -> Result<ForwardOutput<T>> {
        let cache = self.forward_cache(raster)?;
        let proposals = self.proposals(&cache);
        let rois: Vec<BoundingBox<T>> = proposals.iter().map(|p| p.bbox).collect();
        let head = self.head(&cache, &rois);
        let mut objectness = cache.rpn_logits.clone();
        objectness.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(ForwardOutput { objectness, rpn_deltas: cache.rpn_deltas, proposals, head })
    }

    /// Detections in the input frame after final suppression, unthresholded.
    pub fn detect(&self, raster: &Raster<T>) -> Result<Vec<Detection<T>>> {
        let out = self.forward(raster)?;
        let (w, h) = (T::from_usize_lossy(raster.width()), T::from_usize_lossy(raster.height()));
        let min_side = T::lit(self.config.min_proposal_side);
        let items: Vec<Scored<T>> = out
            .head
            .iter()
            .filter_map(|o| {
                let b = decode_box(&o.roi, &clamp_deltas(o.deltas)).ok()?.clip(w, h);
                (b.width() >= min_side && b.height() >= min_side).then_some(Scored::new(b, o.score))
            })
            .collect();
        Ok(nms_indices(&items, T::lit(self.config.nms_iou_final))
            .into_iter()
            .map(|i| Detection { bbox: items[i].bbox, confidence: items[i].score, frame: Frame::Roi, side: None })
            .collect())
    }

    /// Samples anchors and ROIs for one training image. ROIs are the current
    /// proposals plus the ground truth boxes.
    pub fn make_plan<R: Rng>(&self, cache: &ForwardCache<T>, gt: &[BoundingBox<T>], rng: &mut R) -> TrainingPlan<T> {
        let c = &self.config;
        let asg = assign_anchor_labels(&cache.anchors, gt, c);
        let mut pos: Vec<usize> = (0..asg.labels.len()).filter(|&i| asg.labels[i] == AnchorLabel::Positive).collect();
        let mut neg: Vec<usize> = (0..asg.labels.len()).filter(|&i| asg.labels[i] == AnchorLabel::Negative).collect();
        pos.shuffle(rng);
        neg.shuffle(rng);
        let n_pos = pos.len().min((c.rpn_batch as f64 * c.rpn_pos_fraction) as usize);
        let n_neg = neg.len().min(c.rpn_batch - n_pos);
        let mut anchors: Vec<AnchorSample<T>> = pos[..n_pos]
            .iter()
            .map(|&i| {
                let g = &gt[asg.matched[i].expect("positive anchors are matched")];
                AnchorSample { index: i, positive: true, target: Some(encode_box(&cache.anchors[i].bbox, g).to_array()) }
            })
            .chain(neg[..n_neg].iter().map(|&i| AnchorSample { index: i, positive: false, target: None }))
            .collect();
        anchors.sort_by_key(|s| s.index);

        let std = HEAD_DELTA_STD.map(T::lit);
        let fg_iou = T::lit(c.head_fg_iou);
        let candidates: Vec<BoundingBox<T>> = self.proposals(cache).into_iter().map(|p| p.bbox).chain(gt.iter().copied()).collect();
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for roi in candidates {
            let best = gt
                .iter()
                .enumerate()
                .map(|(j, g)| (j, iou(&roi, g)))
                .fold(None, |acc: Option<(usize, T)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v >= fg_iou => {
                    let d = encode_box(&roi, &gt[j]).to_array();
                    fg.push(HeadSample { roi, positive: true, target: Some([0, 1, 2, 3].map(|k| d[k] / std[k])) });
                }
                _ => bg.push(HeadSample { roi, positive: false, target: None }),
            }
        }
        fg.shuffle(rng);
        bg.shuffle(rng);
        let n_fg = fg.len().min((c.head_batch as f64 * c.head_fg_fraction) as usize).max(fg.len().min(1));
        let n_bg = bg.len().min(c.head_batch.saturating_sub(n_fg));
        fg.truncate(n_fg);
        bg.truncate(n_bg);
        fg.extend(bg);
        TrainingPlan { anchors, rois: fg }
    }

    fn terms(&self, cache: &ForwardCache<T>, plan: &TrainingPlan<T>) -> (LossTerms<T>, Vec<HeadCache<T>>) {
        let a = self.config.anchors_per_cell();
        let mut terms = LossTerms::default();
        for s in &plan.anchors {
            terms.rpn_cls.push(ClsTerm { logit: cache.anchor_logit(s.index, a), positive: s.positive });
            if let Some(t) = s.target {
                terms.rpn_reg.push(RegTerm { pred: cache.anchor_deltas(s.index, a).to_array(), target: t });
            }
        }
        let heads: Vec<HeadCache<T>> = plan.rois.iter().map(|s| self.head_forward(cache.features(), &s.roi)).collect();
        for (s, h) in plan.rois.iter().zip(&heads) {
            terms.head_cls.push(ClsTerm { logit: h.logit, positive: s.positive });
            if let Some(t) = s.target {
                terms.head_reg.push(RegTerm { pred: [h.reg[0], h.reg[1], h.reg[2], h.reg[3]], target: t });
            }
        }
        (terms, heads)
    }

    pub fn losses(&self, cache: &ForwardCache<T>, plan: &TrainingPlan<T>) -> Losses<T> {
        compute_losses(&self.terms(cache, plan).0, &self.config).0
    }

    /// Losses and the gradient of the weighted total with respect to every
    /// parameter, for a fixed plan.
    pub fn loss_and_grad(&self, cache: &ForwardCache<T>, plan: &TrainingPlan<T>) -> (Losses<T>, ParamSet<T>) {
        let (terms, heads) = self.terms(cache, plan);
        let (losses, lg) = compute_losses(&terms, &self.config);
        let p = &self.params;
        let l = &self.layout;
        let mut grads = p.zeros_like();
        let feat = cache.features();
        let mut g_feat = FeatureMap::zeros(feat.channels, feat.height, feat.width);

        let mut reg_k = 0;
        for ((s, h), &g_logit) in plan.rois.iter().zip(&heads).zip(&lg.head_cls) {
            let mut g_hidden = l.cls.backward(p, &h.hidden, &[g_logit], &mut grads);
            let g_reg = if s.target.is_some() {
                reg_k += 1;
                lg.head_reg[reg_k - 1].to_vec()
            } else {
                vec![T::zero(); 4]
            };
            let g2 = l.reg.backward(p, &h.hidden, &g_reg, &mut grads);
            for ((g, &g2), &hv) in g_hidden.iter_mut().zip(&g2).zip(&h.hidden) {
                *g = if hv > T::zero() { *g + g2 } else { T::zero() };
            }
            let g_pooled = l.fc.backward(p, &h.pooled, &g_hidden, &mut grads);
            roi_pool_backward(&mut g_feat, &s.roi, self.config.feature_stride, self.config.roi_pool_size, &g_pooled);
        }

        let a = self.config.anchors_per_cell();
        let mut g_logits = FeatureMap::zeros(cache.rpn_logits.channels, cache.rpn_logits.height, cache.rpn_logits.width);
        let mut g_deltas = FeatureMap::zeros(cache.rpn_deltas.channels, cache.rpn_deltas.height, cache.rpn_deltas.width);
        let fw = g_logits.width;
        let mut reg_k = 0;
        for (s, &g) in plan.anchors.iter().zip(&lg.rpn_cls) {
            let (cell, shape) = (s.index / a, s.index % a);
            let (y, x) = (cell / fw, cell % fw);
            g_logits.data[(shape * g_logits.height + y) * fw + x] += g;
            if s.target.is_some() {
                let gr = lg.rpn_reg[reg_k];
                reg_k += 1;
                for k in 0..4 {
                    g_deltas.data[((4 * shape + k) * g_deltas.height + y) * fw + x] += gr[k];
                }
            }
        }
        let mut g_hidden = l.rpn_cls.backward(p, &cache.rpn_hidden, &g_logits, &mut grads, true).expect("input grad");
        let g2 = l.rpn_reg.backward(p, &cache.rpn_hidden, &g_deltas, &mut grads, true).expect("input grad");
        for (g, v) in g_hidden.data.iter_mut().zip(g2.data) {
            *g += v;
        }
        relu_backward_inplace(&cache.rpn_hidden, &mut g_hidden);
        let g_from_rpn = l.rpn_conv.backward(p, feat, &g_hidden, &mut grads, true).expect("input grad");
        for (g, v) in g_feat.data.iter_mut().zip(g_from_rpn.data) {
            *g += v;
        }

        let mut g = g_feat;
        for (si, (stage, sc)) in l.stages.iter().zip(&cache.stages).enumerate().rev() {
            for (bi, ([c1, c2], (mid, out))) in stage.blocks.iter().zip(&sc.blocks).enumerate().rev() {
                let x = if bi == 0 { &sc.down } else { &sc.blocks[bi - 1].1 };
                relu_backward_inplace(out, &mut g);
                let mut g_mid = c2.backward(p, mid, &g, &mut grads, true).expect("input grad");
                relu_backward_inplace(mid, &mut g_mid);
                let g_x = c1.backward(p, x, &g_mid, &mut grads, true).expect("input grad");
                for (a, b) in g.data.iter_mut().zip(g_x.data) {
                    *a += b;
                }
            }
            relu_backward_inplace(&sc.down, &mut g);
            let input = if si == 0 { &cache.input } else { cache.stages[si - 1].output() };
            match stage.down.backward(p, input, &g, &mut grads, si > 0) {
                Some(gi) => g = gi,
                None => break,
            }
        }
        (losses, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BackboneDepth;

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            backbone_channels: [3, 4, 4, 5],
            rpn_channels: 4,
            head_hidden: 6,
            roi_pool_size: 3,
            anchor_scales: vec![16.0, 32.0],
            anchor_ratios: vec![1.0, 2.0],
            rpn_batch: 16,
            head_batch: 8,
            seed: 5,
            ..Default::default()
        }
    }

    fn test_raster(w: usize, h: usize) -> Raster<f64> {
        Raster::from_fn(w, h, |x, y| {
            let blob = (-(((x as f64 - 20.0) / 5.0).powi(2) + ((y as f64 - 30.0) / 4.0).powi(2))).exp();
            (0.2 + 0.1 * ((x * 7 + y * 3) % 11) as f64 / 11.0 + 0.6 * blob).min(1.0)
        })
    }

    #[test]
    fn shapes_follow_stride() {
        let det = Detector::<f64>::new(small_config()).unwrap();
        let c = det.forward_cache(&test_raster(64, 48)).unwrap();
        assert_eq!((c.rpn_logits.width, c.rpn_logits.height, c.rpn_logits.channels), (4, 3, 4));
        assert_eq!(c.rpn_deltas.channels, 16);
        assert_eq!(c.anchors.len(), 4 * 3 * 4);
        let c2 = det.forward_cache(&test_raster(128, 48)).unwrap();
        assert_eq!(c2.rpn_logits.width, 2 * c.rpn_logits.width);
        assert_eq!(det.feature_dims(137, 20), (9, 2));
    }

    #[test]
    fn too_small_raster_rejected() {
        let det = Detector::<f32>::new(small_config()).unwrap();
        assert!(matches!(det.forward_cache(&Raster::zeros(15, 40)), Err(Error::RasterTooSmall { .. })));
    }

    #[test]
    fn outputs_are_probabilities_and_bit_stable() {
        let det = Detector::<f32>::new(DetectorConfig::default()).unwrap();
        let r: Raster<f32> = test_raster(96, 80).cast();
        let a = det.forward(&r).unwrap();
        let b = det.forward(&r).unwrap();
        assert!(a.objectness.data.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(a.head.iter().all(|h| (0.0..=1.0).contains(&h.score)));
        assert_eq!(a.objectness.data, b.objectness.data);
        assert_eq!(a.head, b.head);
        let d = det.detect(&r).unwrap();
        assert!(d.iter().all(|x| x.bbox.x_min >= 0.0 && x.bbox.x_max <= 96.0 && x.bbox.y_max <= 80.0));
    }

    #[test]
    fn params_roundtrip_and_mismatch() {
        let det = Detector::<f64>::new(small_config()).unwrap();
        let again = Detector::from_params(small_config(), det.params().clone()).unwrap();
        assert_eq!(again, det);
        let other = DetectorConfig { head_hidden: 7, ..small_config() };
        assert!(Detector::from_params(other, det.params().clone()).is_err());
    }

    #[test]
    fn plan_samples_positives_for_every_gt() {
        let det = Detector::<f64>::new(small_config()).unwrap();
        let cache = det.forward_cache(&test_raster(64, 48)).unwrap();
        let gt = [BoundingBox::raw(14.0, 24.0, 27.0, 37.0)];
        let plan = det.make_plan(&cache, &gt, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(plan.anchors.iter().any(|s| s.positive));
        assert!(plan.anchors.len() <= 16);
        assert!(plan.rois.iter().any(|s| s.positive && s.roi == gt[0]));
        assert!(plan.rois.len() <= 8);
    }

    fn check_network_gradients(config: DetectorConfig, seed: u64) {
        let mut det = Detector::<f64>::new(config).unwrap();
        // Zero biases leave pre-activations at exactly 0 wherever a ReLU input
        // window is all zero, where the loss has a kink. Jitter every weight.
        let mut jitter = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in &mut det.params_mut().tensors {
            t.data.iter_mut().for_each(|v| *v += jitter.random_range(-0.05..0.05));
        }
        let raster = test_raster(64, 48);
        let gt = [BoundingBox::raw(14.0, 24.0, 27.0, 37.0), BoundingBox::raw(40.0, 5.0, 60.0, 20.0)];
        let cache = det.forward_cache(&raster).unwrap();
        let plan = det.make_plan(&cache, &gt, &mut ChaCha8Rng::seed_from_u64(seed));
        let (_, grads) = det.loss_and_grad(&cache, &plan);
        let loss_at = |d: &Detector<f64>| d.losses(&d.forward_cache(&raster).unwrap(), &plan).total;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = 1e-6;
        for t in 0..grads.tensors.len() {
            for _ in 0..10 {
                let i = rng.random_range(0..grads.get(t).len());
                let orig = det.params().get(t)[i];
                det.params_mut().get_mut(t)[i] = orig + eps;
                let up = loss_at(&det);
                det.params_mut().get_mut(t)[i] = orig - eps;
                let down = loss_at(&det);
                det.params_mut().get_mut(t)[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grads.get(t)[i];
                // Relative tolerance, with an absolute floor at the level of
                // finite-difference round-off for vanishing gradients.
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-9,
                    "{}[{i}]: finite difference {fd}, analytic {an}",
                    grads.tensors[t].name
                );
            }
        }
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        check_network_gradients(small_config(), 11);
    }

    #[test]
    fn residual_gradients_match_finite_differences() {
        let c = DetectorConfig { backbone_depth: BackboneDepth::Deep, backbone_channels: [2, 2, 3, 3], ..small_config() };
        // Deep stacks 33 residual blocks; keep the check to a tiny width.
        check_network_gradients(c, 12);
    }
}
