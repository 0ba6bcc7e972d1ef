//! Focus logits to probabilities to depth, plus the classical argmax baseline.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::types::{validate_focal_distances, DepthMap, FocusProbabilityMap};
use crate::volume::SharpnessVolume;

/// Unnormalized per-pixel focus scores, `[pixel][plane]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusLogits {
    width: usize,
    height: usize,
    planes: usize,
    logits: Vec<f64>,
}

impl FocusLogits {
    pub fn new(width: usize, height: usize, planes: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != width * height * planes {
            return Err(Error::CountMismatch {
                expected: width * height * planes,
                found: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("focus logits"));
        }
        Ok(Self {
            width,
            height,
            planes,
            logits,
        })
    }

    pub fn zeros(width: usize, height: usize, planes: usize) -> Self {
        Self {
            width,
            height,
            planes,
            logits: vec![0.0; width * height * planes],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn values(&self) -> &[f64] {
        &self.logits
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }
}

/// Per-pixel softmax over planes.
pub fn to_probabilities(logits: &FocusLogits) -> FocusProbabilityMap {
    let n = logits.planes;
    let mut probs = vec![0.0; logits.logits.len()];
    for (src, dst) in logits.logits.chunks_exact(n).zip(probs.chunks_exact_mut(n)) {
        math::softmax_into(src, dst);
    }
    FocusProbabilityMap::from_parts_unchecked(logits.width, logits.height, n, probs)
}

/// Pulls `∂L/∂p` back through the softmax to `∂L/∂logits`.
pub fn probabilities_backward(p: &FocusProbabilityMap, grad_p: &[f64]) -> Vec<f64> {
    let n = p.planes();
    let mut out = vec![0.0; grad_p.len()];
    for ((pp, gp), o) in p.iter_pixels().zip(grad_p.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
        math::softmax_backward_into(pp, gp, o);
    }
    out
}

/// Expected focal distance `D(x) = Σ_n p_n(x) f_n`; every pixel is valid.
pub fn depth_from_probabilities(p: &FocusProbabilityMap, focal_distances: &[f64]) -> Result<DepthMap> {
    if focal_distances.len() != p.planes() {
        return Err(Error::CountMismatch {
            expected: p.planes(),
            found: focal_distances.len(),
        });
    }
    let values = p
        .iter_pixels()
        .map(|px| px.iter().zip(focal_distances).map(|(a, f)| a * f).sum())
        .collect();
    let (w, h) = p.dims();
    DepthMap::new(w, h, values)
}

/// Focal distance of the sharpest plane per pixel; lowest index on ties.
pub fn argmax_baseline(s: &SharpnessVolume, focal_distances: &[f64]) -> Result<DepthMap> {
    if focal_distances.len() != s.planes() {
        return Err(Error::CountMismatch {
            expected: s.planes(),
            found: focal_distances.len(),
        });
    }
    validate_focal_distances(focal_distances)?;
    let (w, h) = s.dims();
    let values = (0..w * h)
        .map(|i| focal_distances[math::argmax_first(&s.pixel(i))])
        .collect();
    DepthMap::new(w, h, values)
}
