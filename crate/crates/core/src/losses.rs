//! Training-objective terms with analytic gradients.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{self, pairwise_sum};
use crate::surface::{DiffOperator, GradientField, SurfaceField};
use crate::types::{validate_focal_distances, DepthMap, FocusProbabilityMap};

pub const DEFAULT_LAMBDA_SV: f64 = 20.0;
pub const DEFAULT_LAMBDA_FV: f64 = 100.0;
pub const DEFAULT_BETA: f64 = 1.0;

/// Per-pixel distribution over planes concentrated where the plane's focal
/// distance is close to the ground-truth depth. Stored `[pixel][plane]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessWeights {
    width: usize,
    height: usize,
    planes: usize,
    q: Vec<f64>,
    mask: Vec<bool>,
}

impl SharpnessWeights {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.q[idx * self.planes..(idx + 1) * self.planes]
    }

    /// `(1 − q)` renormalized over planes.
    pub fn inverted(&self) -> Self {
        let norm = (self.planes - 1) as f64;
        Self {
            q: self.q.iter().map(|&v| (1.0 - v) / norm).collect(),
            ..self.clone()
        }
    }

    /// Uniform weights with the same mask.
    pub fn uniform(&self) -> Self {
        Self {
            q: vec![1.0 / self.planes as f64; self.q.len()],
            ..self.clone()
        }
    }
}

/// `q_n(x) = softmax_n(−|f_n − D*(x)|)` with raw meters. Invalid pixels get
/// the uniform distribution.
pub fn sharpness_weights(gt: &DepthMap, focal_distances: &[f64]) -> Result<SharpnessWeights> {
    validate_focal_distances(focal_distances)?;
    gt.require_valid()?;
    let n = focal_distances.len();
    let mut q = vec![1.0 / n as f64; gt.values().len() * n];
    let mut neg = vec![0.0; n];
    for (i, (&d, &valid)) in gt.values().iter().zip(gt.mask()).enumerate() {
        if !valid {
            continue;
        }
        for (o, &f) in neg.iter_mut().zip(focal_distances) {
            *o = -(f - d).abs();
        }
        math::softmax_into(&neg, &mut q[i * n..(i + 1) * n]);
    }
    Ok(SharpnessWeights {
        width: gt.width(),
        height: gt.height(),
        planes: n,
        q,
        mask: gt.mask().to_vec(),
    })
}

/// 3×3 convolution fusing `C` input channels into an x and a y gradient
/// prediction, with replicate padding.
///
/// Parameters are one flat vector: weight `(ky, kx, c, o)` lives at
/// `((ky * 3 + kx) * C + c) * 2 + o` and the two biases come last.
#[derive(Debug, Clone, PartialEq)]
pub struct GradFusionMap {
    channels: usize,
    params: Vec<f64>,
}

impl GradFusionMap {
    pub fn param_count(channels: usize) -> usize {
        18 * channels + 2
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            channels,
            params: vec![0.0; Self::param_count(channels)],
        }
    }

    pub fn from_params(channels: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::param_count(channels) {
            return Err(Error::CountMismatch {
                expected: Self::param_count(channels),
                found: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fusion map parameters"));
        }
        Ok(Self { channels, params })
    }

    /// Weights uniform in `[−0.1, 0.1]`, zero bias.
    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(channels);
        let nw = 18 * channels;
        for w in &mut m.params[..nw] {
            *w = rng.random_range(-0.1..=0.1);
        }
        m
    }

    /// Forward differences of the channel average: reproduces the
    /// [`DiffOperator`] stencil, boundary rows included.
    pub fn channel_mean_difference(channels: usize) -> Self {
        let mut m = Self::zeros(channels);
        let s = 1.0 / channels as f64;
        for c in 0..channels {
            m.set_weight(1, 1, c, 0, -s);
            m.set_weight(1, 2, c, 0, s);
            m.set_weight(1, 1, c, 1, -s);
            m.set_weight(2, 1, c, 1, s);
        }
        m
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    #[inline]
    fn widx(&self, ky: usize, kx: usize, c: usize, o: usize) -> usize {
        ((ky * 3 + kx) * self.channels + c) * 2 + o
    }

    pub fn weight(&self, ky: usize, kx: usize, c: usize, o: usize) -> f64 {
        self.params[self.widx(ky, kx, c, o)]
    }

    pub fn set_weight(&mut self, ky: usize, kx: usize, c: usize, o: usize, v: f64) {
        let i = self.widx(ky, kx, c, o);
        self.params[i] = v;
    }

    pub fn bias(&self, o: usize) -> f64 {
        self.params[18 * self.channels + o]
    }

    /// `out[o * HW + p]`: output `o` reads `inputs[o]` (channel-major `C×HW`).
    pub fn apply(&self, inputs: [&[f64]; 2], width: usize, height: usize, out: &mut [f64]) {
        let hw = width * height;
        let pw = width + 2;
        let mut pad = vec![0.0; pw * (height + 2)];
        for o in 0..2 {
            let src = inputs[o];
            let dst = &mut out[o * hw..(o + 1) * hw];
            dst.iter_mut().for_each(|v| *v = self.bias(o));
            for c in 0..self.channels {
                pad_replicate(&src[c * hw..(c + 1) * hw], width, height, &mut pad);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wgt = self.weight(ky, kx, c, o);
                        if wgt == 0.0 {
                            continue;
                        }
                        for y in 0..height {
                            let row = &pad[(y + ky) * pw + kx..(y + ky) * pw + kx + width];
                            for (d, s) in dst[y * width..(y + 1) * width].iter_mut().zip(row) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates input and parameter gradients for `∂L/∂out`.
    pub fn backward(
        &self,
        inputs: [&[f64]; 2],
        width: usize,
        height: usize,
        grad_out: &[f64],
        grad_inputs: [&mut [f64]; 2],
        grad_params: &mut [f64],
    ) {
        let hw = width * height;
        let pw = width + 2;
        let mut pad = vec![0.0; pw * (height + 2)];
        let mut gpad = vec![0.0; pw * (height + 2)];
        for (o, grad_in) in grad_inputs.into_iter().enumerate() {
            let src = inputs[o];
            let go = &grad_out[o * hw..(o + 1) * hw];
            grad_params[18 * self.channels + o] += pairwise_sum(go);
            for c in 0..self.channels {
                pad_replicate(&src[c * hw..(c + 1) * hw], width, height, &mut pad);
                gpad.iter_mut().for_each(|v| *v = 0.0);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wi = self.widx(ky, kx, c, o);
                        let wgt = self.params[wi];
                        let mut gw = 0.0;
                        for y in 0..height {
                            let off = (y + ky) * pw + kx;
                            let g = &go[y * width..(y + 1) * width];
                            gw += math::dot(g, &pad[off..off + width]);
                            for (d, gv) in gpad[off..off + width].iter_mut().zip(g) {
                                *d += wgt * gv;
                            }
                        }
                        grad_params[wi] += gw;
                    }
                }
                unpad_accumulate(&gpad, width, height, &mut grad_in[c * hw..(c + 1) * hw]);
            }
        }
    }
}

/// Copies `src` into a `(W+2)×(H+2)` buffer with replicated borders.
fn pad_replicate(src: &[f64], width: usize, height: usize, pad: &mut [f64]) {
    let pw = width + 2;
    for py in 0..height + 2 {
        let sy = py.saturating_sub(1).min(height - 1);
        let row = &src[sy * width..(sy + 1) * width];
        let dst = &mut pad[py * pw..(py + 1) * pw];
        dst[0] = row[0];
        dst[1..=width].copy_from_slice(row);
        dst[width + 1] = row[width - 1];
    }
}

/// Adjoint of [`pad_replicate`], added into `dst`.
fn unpad_accumulate(pad: &[f64], width: usize, height: usize, dst: &mut [f64]) {
    let pw = width + 2;
    for py in 0..height + 2 {
        let sy = py.saturating_sub(1).min(height - 1);
        let src = &pad[py * pw..(py + 1) * pw];
        let row = &mut dst[sy * width..(sy + 1) * width];
        row[0] += src[0];
        for (d, s) in row.iter_mut().zip(&src[1..=width]) {
            *d += s;
        }
        row[width - 1] += src[width + 1];
    }
}

/// Ground-truth depth gradient at the surface working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTarget {
    depth: DepthMap,
    grad: Vec<f64>,
    valid: Vec<bool>,
}

impl GradientTarget {
    /// Area-downsamples `gt` to `width x height` over valid pixels, then takes
    /// forward differences with the [`DiffOperator`] stencil. A difference is
    /// valid when every cell it reads is valid.
    pub fn from_depth(gt: &DepthMap, width: usize, height: usize) -> Result<Self> {
        let op = DiffOperator::new(width, height)?;
        let depth = gt.area_downsample(width, height)?;
        depth.require_valid()?;
        let hw = width * height;
        let mut grad = vec![0.0; 2 * hw];
        op.apply(depth.values(), &mut grad);
        let m = depth.mask();
        let mut valid = vec![false; 2 * hw];
        for y in 0..height {
            for x in 0..width {
                let p = y * width + x;
                valid[p] = m[p] && (x + 1 == width || m[p + 1]);
                valid[hw + p] = m[p] && (y + 1 == height || m[p + width]);
            }
        }
        for (g, &v) in grad.iter_mut().zip(&valid) {
            if !v {
                *g = 0.0;
            }
        }
        Ok(Self { depth, grad, valid })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims()
    }

    /// The downsampled ground truth.
    pub fn depth(&self) -> &DepthMap {
        &self.depth
    }

    /// `[∂x D*; ∂y D*]`, zero where invalid.
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

/// Value and gradients of the spatial variational loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialLoss {
    pub value: f64,
    /// Same layout as the input field's data.
    pub grad_input: Vec<f64>,
    pub grad_theta: Vec<f64>,
}

fn check_sv_shapes(
    dims: (usize, usize),
    channels: usize,
    planes: usize,
    theta: &GradFusionMap,
    target: &GradientTarget,
    q: &SharpnessWeights,
) -> Result<()> {
    if dims != target.dims() {
        return Err(Error::DimensionMismatch {
            expected: target.dims(),
            found: dims,
        });
    }
    if q.dims() != target.dims() {
        return Err(Error::DimensionMismatch {
            expected: target.dims(),
            found: q.dims(),
        });
    }
    if planes != q.planes() {
        return Err(Error::CountMismatch {
            expected: q.planes(),
            found: planes,
        });
    }
    if channels != theta.channels() {
        return Err(Error::ChannelMismatch {
            expected: theta.channels(),
            found: channels,
        });
    }
    Ok(())
}

/// Shared kernel: `inputs[n] = (x-input, y-input)` per plane, each `C×HW`.
fn spatial_core(
    inputs: &[[&[f64]; 2]],
    theta: &GradFusionMap,
    target: &GradientTarget,
    q: &SharpnessWeights,
) -> (f64, Vec<[Vec<f64>; 2]>, Vec<f64>) {
    let (w, h) = target.dims();
    let hw = w * h;
    let planes = inputs.len();
    let c = theta.channels();
    let mut terms = Vec::with_capacity(planes * 2 * hw);
    let mut pred = vec![0.0; 2 * hw];
    let mut grad_out = vec![0.0; 2 * hw];
    let mut grad_theta = vec![0.0; theta.params().len()];
    let mut grads = Vec::with_capacity(planes);
    for (n, input) in inputs.iter().enumerate() {
        theta.apply(*input, w, h, &mut pred);
        for o in 0..2 {
            for p in 0..hw {
                let r = o * hw + p;
                if !target.valid[r] {
                    grad_out[r] = 0.0;
                    continue;
                }
                let weight = q.pixel(p)[n];
                let diff = pred[r] - target.grad[r];
                terms.push(weight * diff.abs());
                // subgradient of |·| at 0 is taken as 0
                grad_out[r] = if diff > 0.0 {
                    weight
                } else if diff < 0.0 {
                    -weight
                } else {
                    0.0
                };
            }
        }
        let mut gx = vec![0.0; c * hw];
        let mut gy = vec![0.0; c * hw];
        theta.backward(*input, w, h, &grad_out, [&mut gx, &mut gy], &mut grad_theta);
        grads.push([gx, gy]);
    }
    (pairwise_sum(&terms), grads, grad_theta)
}

/// `Σ_{x,n} q_n(x) ‖∇D*(x) − θ(z_n)(x)‖₁` over valid target entries.
pub fn spatial_variational_loss(
    z: &SurfaceField,
    theta: &GradFusionMap,
    target: &GradientTarget,
    q: &SharpnessWeights,
) -> Result<SpatialLoss> {
    check_sv_shapes(z.dims(), z.channels(), z.planes(), theta, target, q)?;
    let inputs: Vec<[&[f64]; 2]> = (0..z.planes()).map(|n| [z.plane(n), z.plane(n)]).collect();
    let (value, grads, grad_theta) = spatial_core(&inputs, theta, target, q);
    let grad_input = grads
        .into_iter()
        .flat_map(|[gx, gy]| gx.into_iter().zip(gy).map(|(a, b)| a + b))
        .collect();
    Ok(SpatialLoss {
        value,
        grad_input,
        grad_theta,
    })
}

/// Spatial loss applied to the raw gradient field without the integrability
/// projection: the x output fuses the x components, the y output the y
/// components.
/// Per plane, the x halves of every channel followed by the y halves, the
/// layout [`GradFusionMap::apply`] expects.
pub(crate) fn split_gradient_field(gamma: &GradientField) -> Vec<[Vec<f64>; 2]> {
    let hw = gamma.dims().0 * gamma.dims().1;
    let c = gamma.channels();
    (0..gamma.planes())
        .map(|n| {
            let mut xs = Vec::with_capacity(c * hw);
            let mut ys = Vec::with_capacity(c * hw);
            for ch in 0..c {
                let g = gamma.channel(n, ch);
                xs.extend_from_slice(&g[..hw]);
                ys.extend_from_slice(&g[hw..]);
            }
            [xs, ys]
        })
        .collect()
}

pub fn direct_gradient_loss(
    gamma: &GradientField,
    theta: &GradFusionMap,
    target: &GradientTarget,
    q: &SharpnessWeights,
) -> Result<SpatialLoss> {
    check_sv_shapes(gamma.dims(), gamma.channels(), gamma.planes(), theta, target, q)?;
    let (w, h) = gamma.dims();
    let hw = w * h;
    let c = gamma.channels();
    let split = split_gradient_field(gamma);
    let inputs: Vec<[&[f64]; 2]> = split.iter().map(|[a, b]| [a.as_slice(), b.as_slice()]).collect();
    let (value, grads, grad_theta) = spatial_core(&inputs, theta, target, q);
    let mut grad_input = Vec::with_capacity(gamma.data().len());
    for [gx, gy] in grads {
        for ch in 0..c {
            grad_input.extend_from_slice(&gx[ch * hw..(ch + 1) * hw]);
            grad_input.extend_from_slice(&gy[ch * hw..(ch + 1) * hw]);
        }
    }
    Ok(SpatialLoss {
        value,
        grad_input,
        grad_theta,
    })
}

/// Value and gradient of the focal variational loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalLoss {
    /// Sum over pixels.
    pub value: f64,
    /// Per-pixel mean.
    pub mean: f64,
    /// `∂value/∂p`, same layout as the probability map.
    pub grad: Vec<f64>,
}

/// Bidirectional soft monotonicity: squared rises after the peak plane and
/// squared drops before it, summed over pixels. The peak index is the lowest
/// argmax and is treated as constant when differentiating.
pub fn focal_variational_loss(p: &FocusProbabilityMap) -> FocalLoss {
    let n = p.planes();
    let mut per_pixel = Vec::with_capacity(p.pixels());
    let mut grad = vec![0.0; p.probs().len()];
    for (idx, px) in p.iter_pixels().enumerate() {
        let g = &mut grad[idx * n..(idx + 1) * n];
        let k = math::argmax_first(px);
        let mut acc = 0.0;
        for i in 0..k {
            let d = px[i] - px[i + 1];
            if d > 0.0 {
                acc += d * d;
                g[i] += 2.0 * d;
                g[i + 1] -= 2.0 * d;
            }
        }
        for i in k..n - 1 {
            let d = px[i + 1] - px[i];
            if d > 0.0 {
                acc += d * d;
                g[i + 1] += 2.0 * d;
                g[i] -= 2.0 * d;
            }
        }
        per_pixel.push(acc);
    }
    let value = pairwise_sum(&per_pixel);
    FocalLoss {
        value,
        mean: value / p.pixels() as f64,
        grad,
    }
}

/// Value and gradient of the depth regression loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    /// `∂value/∂pred`, zero on excluded pixels.
    pub grad: Vec<f64>,
}

/// Smooth-L1 with transition `beta`, averaged over pixels valid in both maps.
pub fn depth_loss(pred: &DepthMap, gt: &DepthMap, beta: f64) -> Result<DepthLoss> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            found: pred.dims(),
        });
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidConfig("beta must be positive"));
    }
    let count = pred.mask().iter().zip(gt.mask()).filter(|(a, b)| **a && **b).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = 1.0 / count as f64;
    let mut terms = Vec::with_capacity(count);
    let mut grad = vec![0.0; pred.values().len()];
    for (i, g) in grad.iter_mut().enumerate() {
        if !(pred.mask()[i] && gt.mask()[i]) {
            continue;
        }
        let e = pred.values()[i] - gt.values()[i];
        if e.abs() < beta {
            terms.push(0.5 * e * e / beta);
            *g = e / beta * inv;
        } else {
            terms.push(e.abs() - 0.5 * beta);
            *g = e.signum() * inv;
        }
    }
    Ok(DepthLoss {
        value: pairwise_sum(&terms) * inv,
        grad,
    })
}

/// Breakdown of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub total: f64,
    pub depth_term: f64,
    pub sv_term: f64,
    pub fv_term: f64,
    pub lambda_sv: f64,
    pub lambda_fv: f64,
}

/// `total = depth + λ_sv · sv + λ_fv · fv`.
pub fn total_loss(depth_term: f64, sv_term: f64, fv_term: f64, lambda_sv: f64, lambda_fv: f64) -> LossReport {
    LossReport {
        total: depth_term + lambda_sv * sv_term + lambda_fv * fv_term,
        depth_term,
        sv_term,
        fv_term,
        lambda_sv,
        lambda_fv,
    }
}
