//! Dense tensors and the hand-differentiated layers of the detector:
//! 2-D convolution, ReLU, fully connected, and bilinear ROI pooling.

use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;
use crate::scalar::Scalar;

/// `channels x height x width` activation, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Named, shape-tagged parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { name: name.into(), shape, data: vec![T::zero(); len] }
    }
}

/// Ordered parameter collection; gradients and optimizer state share its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: Vec::new() }
    }

    pub fn push(&mut self, t: Tensor<T>) -> usize {
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|t| Tensor::zeros(t.name.clone(), t.shape.clone())).collect() }
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.tensors[i].data
    }

    pub fn len_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn l2_norm(&self) -> T {
        self.tensors.iter().flat_map(|t| &t.data).map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flat_map(|t| &t.data).all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), shape: t.shape.clone(), data: t.data.iter().map(|v| U::lit(v.as_f64())).collect() })
                .collect(),
        }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Square convolution with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[inline]
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding).saturating_sub(kernel) / stride + 1
}

/// Output positions `o` in `[lo, hi)` whose input index `o * stride + k - pad`
/// falls inside `[0, len_in)`.
#[inline]
fn valid_range(len_in: usize, len_out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let reach = len_in + pad;
    let hi = if reach > k { (reach - k).div_ceil(stride).min(len_out) } else { 0 };
    (lo.min(hi), hi)
}

impl Conv2d {
    pub fn out_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (
            conv_out_len(height, self.kernel, self.stride, self.padding),
            conv_out_len(width, self.kernel, self.stride, self.padding),
        )
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, input: &FeatureMap<T>) -> FeatureMap<T> {
        debug_assert_eq!(input.channels, self.in_channels);
        let (w, b) = (params.get(self.weight), params.get(self.bias));
        let (h_in, w_in) = (input.height, input.width);
        let (h_out, w_out) = self.out_dims(h_in, w_in);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let mut out = FeatureMap::zeros(self.out_channels, h_out, w_out);
        let plane_len = h_out * w_out;
        for co in 0..self.out_channels {
            let plane = &mut out.data[co * plane_len..(co + 1) * plane_len];
            plane.fill(b[co]);
            for ci in 0..self.in_channels {
                let src = input.plane(ci);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(h_in, h_out, ky, s, p);
                    for kx in 0..k {
                        let wv = w[((co * self.in_channels + ci) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(w_in, w_out, kx, s, p);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let row_in = &src[iy * w_in..(iy + 1) * w_in];
                            let row_out = &mut plane[oy * w_out..(oy + 1) * w_out];
                            if s == 1 {
                                let off = ox_lo + kx - p;
                                for (o, &i) in row_out[ox_lo..ox_hi].iter_mut().zip(&row_in[off..off + (ox_hi - ox_lo)]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    row_out[ox] += wv * row_in[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grads` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        input: &FeatureMap<T>,
        grad_out: &FeatureMap<T>,
        grads: &mut ParamSet<T>,
        want_input: bool,
    ) -> Option<FeatureMap<T>> {
        let w = params.get(self.weight);
        let (h_in, w_in) = (input.height, input.width);
        let (h_out, w_out) = (grad_out.height, grad_out.width);
        let (k, s, p) = (self.kernel, self.stride, self.padding);

        {
            let gb = grads.get_mut(self.bias);
            for co in 0..self.out_channels {
                gb[co] += grad_out.plane(co).iter().copied().sum::<T>();
            }
        }
        let gw = grads.get_mut(self.weight);
        let mut grad_in = want_input.then(|| FeatureMap::zeros(self.in_channels, h_in, w_in));
        for co in 0..self.out_channels {
            let g = grad_out.plane(co);
            for ci in 0..self.in_channels {
                let src = input.plane(ci);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(h_in, h_out, ky, s, p);
                    for kx in 0..k {
                        let widx = ((co * self.in_channels + ci) * k + ky) * k + kx;
                        let wv = w[widx];
                        let (ox_lo, ox_hi) = valid_range(w_in, w_out, kx, s, p);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let row_in = &src[iy * w_in..(iy + 1) * w_in];
                            let row_g = &g[oy * w_out..(oy + 1) * w_out];
                            for ox in ox_lo..ox_hi {
                                acc += row_g[ox] * row_in[ox * s + kx - p];
                            }
                            if let Some(gi) = grad_in.as_mut() {
                                let base = (ci * h_in + iy) * w_in;
                                let row_gi = &mut gi.data[base..base + w_in];
                                for ox in ox_lo..ox_hi {
                                    row_gi[ox * s + kx - p] += wv * row_g[ox];
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

pub fn relu_inplace<T: Scalar>(m: &mut FeatureMap<T>) {
    m.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(output: &FeatureMap<T>, grad: &mut FeatureMap<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// `y = W x + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &[T]) -> Vec<T> {
        let (w, b) = (params.get(self.weight), params.get(self.bias));
        (0..self.out_features)
            .map(|o| {
                let row = &w[o * self.in_features..(o + 1) * self.in_features];
                b[o] + row.iter().zip(x).map(|(&a, &v)| a * v).sum::<T>()
            })
            .collect()
    }

    pub fn backward<T: Scalar>(&self, params: &ParamSet<T>, x: &[T], grad_out: &[T], grads: &mut ParamSet<T>) -> Vec<T> {
        let w = params.get(self.weight);
        let mut grad_in = vec![T::zero(); self.in_features];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let row = &w[o * self.in_features..(o + 1) * self.in_features];
            for (gi, &wv) in grad_in.iter_mut().zip(row) {
                *gi += g * wv;
            }
        }
        {
            let gw = grads.get_mut(self.weight);
            for (o, &g) in grad_out.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let row = &mut gw[o * self.in_features..(o + 1) * self.in_features];
                for (r, &v) in row.iter_mut().zip(x) {
                    *r += g * v;
                }
            }
        }
        let gb = grads.get_mut(self.bias);
        for (b, &g) in gb.iter_mut().zip(grad_out) {
            *b += g;
        }
        grad_in
    }
}

/// Bilinear sample location on a feature map: the two neighbours along each
/// axis and the weight of the upper neighbour.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn tap<T: Scalar>(coord: T, len: usize) -> Tap<T> {
    let max = T::from_usize_lossy(len - 1);
    let c = coord.clamp_to(T::zero(), max);
    let lo = c.floor().as_f64() as usize;
    let hi = (lo + 1).min(len - 1);
    Tap { lo, hi, frac: c - T::from_usize_lossy(lo) }
}

/// Sample grid for one box: bin `(i, j)` of a `size x size` grid samples the
/// feature map at the bin center. Feature cell `(x, y)` is centered at image
/// point `((x + 0.5) stride, (y + 0.5) stride)`; samples outside the map are
/// clamped to its border.
fn roi_taps<T: Scalar>(roi: &BoundingBox<T>, stride: usize, size: usize, fm_h: usize, fm_w: usize) -> (Vec<Tap<T>>, Vec<Tap<T>>) {
    let stride = T::from_usize_lossy(stride);
    let n = T::from_usize_lossy(size);
    let half = T::lit(0.5);
    let xs = (0..size)
        .map(|j| {
            let x = roi.x_min + (T::from_usize_lossy(j) + half) * roi.width() / n;
            tap(x / stride - half, fm_w)
        })
        .collect();
    let ys = (0..size)
        .map(|i| {
            let y = roi.y_min + (T::from_usize_lossy(i) + half) * roi.height() / n;
            tap(y / stride - half, fm_h)
        })
        .collect();
    (ys, xs)
}

/// Pools the region under `roi` (image coordinates) to `channels x size x size`,
/// flattened channel-major.
pub fn roi_pool<T: Scalar>(fm: &FeatureMap<T>, roi: &BoundingBox<T>, stride: usize, size: usize) -> Vec<T> {
    let (ys, xs) = roi_taps(roi, stride, size, fm.height, fm.width);
    let mut out = Vec::with_capacity(fm.channels * size * size);
    for c in 0..fm.channels {
        let plane = fm.plane(c);
        let at = |y: usize, x: usize| plane[y * fm.width + x];
        for ty in &ys {
            for tx in &xs {
                let top = at(ty.lo, tx.lo) * (T::one() - tx.frac) + at(ty.lo, tx.hi) * tx.frac;
                let bottom = at(ty.hi, tx.lo) * (T::one() - tx.frac) + at(ty.hi, tx.hi) * tx.frac;
                out.push(top * (T::one() - ty.frac) + bottom * ty.frac);
            }
        }
    }
    out
}

/// Scatters the pooled gradient back onto the feature map gradient. The box
/// coordinates receive no gradient.
pub fn roi_pool_backward<T: Scalar>(
    grad_fm: &mut FeatureMap<T>,
    roi: &BoundingBox<T>,
    stride: usize,
    size: usize,
    grad_out: &[T],
) {
    let (ys, xs) = roi_taps(roi, stride, size, grad_fm.height, grad_fm.width);
    let (h, w) = (grad_fm.height, grad_fm.width);
    let mut k = 0;
    for c in 0..grad_fm.channels {
        let plane = &mut grad_fm.data[c * h * w..(c + 1) * h * w];
        for ty in &ys {
            for tx in &xs {
                let g = grad_out[k];
                k += 1;
                if g == T::zero() {
                    continue;
                }
                let (one_x, one_y) = (T::one() - tx.frac, T::one() - ty.frac);
                plane[ty.lo * w + tx.lo] += g * one_y * one_x;
                plane[ty.lo * w + tx.hi] += g * one_y * tx.frac;
                plane[ty.hi * w + tx.lo] += g * ty.frac * one_x;
                plane[ty.hi * w + tx.hi] += g * ty.frac * tx.frac;
            }
        }
    }
}
