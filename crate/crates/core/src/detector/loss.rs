use serde::{Deserialize, Serialize};

use super::DetectorConfig;
use crate::scalar::Scalar;

/// Binary cross-entropy term on a raw logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsTerm<T> {
    pub logit: T,
    pub positive: bool,
}

/// Smooth-L1 term between predicted and target deltas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegTerm<T> {
    pub pred: [T; 4],
    pub target: [T; 4],
}

/// All terms of one sample. Classification terms cover the sampled anchors
/// (or ROIs); regression terms only their positives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTerms<T> {
    pub rpn_cls: Vec<ClsTerm<T>>,
    pub rpn_reg: Vec<RegTerm<T>>,
    pub head_cls: Vec<ClsTerm<T>>,
    pub head_reg: Vec<RegTerm<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Losses<T> {
    pub rpn_cls: T,
    pub rpn_reg: T,
    pub head_cls: T,
    pub head_reg: T,
    pub total: T,
}

impl<T: Scalar> Losses<T> {
    pub fn zero() -> Self {
        Self { rpn_cls: T::zero(), rpn_reg: T::zero(), head_cls: T::zero(), head_reg: T::zero(), total: T::zero() }
    }

    pub fn to_array(&self) -> [T; 5] {
        [self.rpn_cls, self.rpn_reg, self.head_cls, self.head_reg, self.total]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn add(&mut self, other: &Self) {
        self.rpn_cls += other.rpn_cls;
        self.rpn_reg += other.rpn_reg;
        self.head_cls += other.head_cls;
        self.head_reg += other.head_reg;
        self.total += other.total;
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            rpn_cls: self.rpn_cls * s,
            rpn_reg: self.rpn_reg * s,
            head_cls: self.head_cls * s,
            head_reg: self.head_reg * s,
            total: self.total * s,
        }
    }

    pub fn to_f64(&self) -> Losses<f64> {
        Losses {
            rpn_cls: self.rpn_cls.as_f64(),
            rpn_reg: self.rpn_reg.as_f64(),
            head_cls: self.head_cls.as_f64(),
            head_reg: self.head_reg.as_f64(),
            total: self.total.as_f64(),
        }
    }
}

/// Derivatives of the weighted total with respect to every logit and every
/// predicted delta, in the order of the terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossGrads<T> {
    pub rpn_cls: Vec<T>,
    pub rpn_reg: Vec<[T; 4]>,
    pub head_cls: Vec<T>,
    pub head_reg: Vec<[T; 4]>,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `-y ln p - (1 - y) ln(1 - p)` with `p = sigmoid(logit)`, in a form that
/// stays finite for large logits. Returns the loss and its logit derivative.
pub fn bce_with_logits<T: Scalar>(logit: T, positive: bool) -> (T, T) {
    let y = if positive { T::one() } else { T::zero() };
    let loss = logit.max(T::zero()) - logit * y + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - y)
}

/// Smooth L1 with transition point `beta`; returns value and derivative.
pub fn smooth_l1<T: Scalar>(x: T, beta: T) -> (T, T) {
    let a = x.abs();
    if a < beta {
        (T::lit(0.5) * x * x / beta, x / beta)
    } else {
        (a - T::lit(0.5) * beta, x.signum())
    }
}

fn cls_stage<T: Scalar>(terms: &[ClsTerm<T>], weight: T) -> (T, Vec<T>) {
    if terms.is_empty() {
        return (T::zero(), Vec::new());
    }
    let n = T::from_usize_lossy(terms.len());
    let mut sum = T::zero();
    let grads = terms
        .iter()
        .map(|t| {
            let (l, g) = bce_with_logits(t.logit, t.positive);
            sum += l;
            weight * g / n
        })
        .collect();
    (sum / n, grads)
}

fn reg_stage<T: Scalar>(terms: &[RegTerm<T>], normalizer: usize, beta: T, weight: T) -> (T, Vec<[T; 4]>) {
    if terms.is_empty() {
        return (T::zero(), Vec::new());
    }
    let n = T::from_usize_lossy(normalizer.max(1));
    let mut sum = T::zero();
    let grads = terms
        .iter()
        .map(|t| {
            let mut g = [T::zero(); 4];
            for k in 0..4 {
                let (l, d) = smooth_l1(t.pred[k] - t.target[k], beta);
                sum += l;
                g[k] = weight * d / n;
            }
            g
        })
        .collect();
    (sum / n, grads)
}

/// Cross-entropy averaged over the sampled classification terms; smooth L1
/// summed over the four coordinates of each positive and divided by the
/// number of sampled terms of the same stage. Regression terms vanish when
/// there are no positives.
pub fn compute_losses<T: Scalar>(terms: &LossTerms<T>, config: &DetectorConfig) -> (Losses<T>, LossGrads<T>) {
    let w = config.loss_weights.map(T::lit);
    let (rpn_cls, g_rpn_cls) = cls_stage(&terms.rpn_cls, w[0]);
    let (rpn_reg, g_rpn_reg) =
        reg_stage(&terms.rpn_reg, terms.rpn_cls.len(), T::lit(config.rpn_smooth_l1_beta), w[1]);
    let (head_cls, g_head_cls) = cls_stage(&terms.head_cls, w[2]);
    let (head_reg, g_head_reg) =
        reg_stage(&terms.head_reg, terms.head_cls.len(), T::lit(config.head_smooth_l1_beta), w[3]);
    let total = w[0] * rpn_cls + w[1] * rpn_reg + w[2] * head_cls + w[3] * head_reg;
    (
        Losses { rpn_cls, rpn_reg, head_cls, head_reg, total },
        LossGrads { rpn_cls: g_rpn_cls, rpn_reg: g_rpn_reg, head_cls: g_head_cls, head_reg: g_head_reg },
    )
}
