//! Depth accuracy metrics and the invalid focus trend diagnostic.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{self, pairwise_sum};
use crate::types::{DepthMap, FocusProbabilityMap};

/// Predictions at or below this value are clamped before relative and log
/// metrics.
pub const PRED_FLOOR: f64 = 1e-6;
/// Bumpiness is reported multiplied by this factor.
pub const BUMP_SCALE: f64 = 100.0;
pub const DEFAULT_TREND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub mse: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub absrel: f64,
    pub sqrel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub bump: f64,
    pub valid_pixels: usize,
    /// Valid pixels whose prediction was raised to [`PRED_FLOOR`].
    pub clamped_pixels: usize,
    pub invalid_trend_pct: Option<f64>,
}

/// Scores `pred` against `gt` over pixels valid in `gt`.
///
/// MSE and RMSE use the raw prediction; AbsRel, SqRel, log RMSE and the δ
/// accuracies use the prediction clamped to [`PRED_FLOOR`]. Bumpiness is the
/// mean squared four-neighbour Laplacian of `pred` over interior pixels whose
/// whole stencil is valid in both maps, times [`BUMP_SCALE`].
pub fn evaluate(pred: &DepthMap, gt: &DepthMap) -> Result<MetricsReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            found: pred.dims(),
        });
    }
    let n = gt.valid_count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mut sq = Vec::with_capacity(n);
    let mut abs_rel = Vec::with_capacity(n);
    let mut sq_rel = Vec::with_capacity(n);
    let mut log_sq = Vec::with_capacity(n);
    let mut hits = [0usize; 3];
    let mut clamped = 0;
    let thresholds = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];
    for ((&d, &g), _) in pred.values().iter().zip(gt.values()).zip(gt.mask()).filter(|(_, &m)| m) {
        let e = d - g;
        sq.push(e * e);
        let dc = if d > PRED_FLOOR && d.is_finite() {
            d
        } else {
            clamped += 1;
            if d.is_nan() {
                PRED_FLOOR
            } else {
                d.max(PRED_FLOOR)
            }
        };
        let ec = dc - g;
        abs_rel.push(ec.abs() / g);
        sq_rel.push(ec * ec / g);
        let le = math::ln(dc) - math::ln(g);
        log_sq.push(le * le);
        let ratio = (dc / g).max(g / dc);
        for (hit, t) in hits.iter_mut().zip(thresholds) {
            if ratio < t {
                *hit += 1;
            }
        }
    }
    let nf = n as f64;
    let mse = pairwise_sum(&sq) / nf;
    Ok(MetricsReport {
        mse,
        rmse: math::sqrt(mse),
        log_rmse: math::sqrt(pairwise_sum(&log_sq) / nf),
        absrel: pairwise_sum(&abs_rel) / nf,
        sqrel: pairwise_sum(&sq_rel) / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        bump: bumpiness(pred, gt),
        valid_pixels: n,
        clamped_pixels: clamped,
        invalid_trend_pct: None,
    })
}

/// [`evaluate`] plus the invalid focus trend of `probs`.
pub fn evaluate_with_probs(pred: &DepthMap, gt: &DepthMap, probs: &FocusProbabilityMap) -> Result<MetricsReport> {
    let mut r = evaluate(pred, gt)?;
    r.invalid_trend_pct = Some(invalid_focus_trend(probs, DEFAULT_TREND_TOL));
    Ok(r)
}

fn bumpiness(pred: &DepthMap, gt: &DepthMap) -> f64 {
    let (w, h) = pred.dims();
    if w < 3 || h < 3 {
        return 0.0;
    }
    let ok = |x: usize, y: usize| pred.is_valid(x, y) && gt.is_valid(x, y);
    let mut terms = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if !(ok(x, y) && ok(x - 1, y) && ok(x + 1, y) && ok(x, y - 1) && ok(x, y + 1)) {
                continue;
            }
            let lap = pred.get(x - 1, y) + pred.get(x + 1, y) + pred.get(x, y - 1) + pred.get(x, y + 1)
                - 4.0 * pred.get(x, y);
            terms.push(lap * lap);
        }
    }
    if terms.is_empty() {
        0.0
    } else {
        BUMP_SCALE * pairwise_sum(&terms) / terms.len() as f64
    }
}

/// Whether a distribution fails to rise monotonically up to its lowest argmax
/// and fall monotonically after it, allowing steps of size `tol`.
pub fn is_invalid_trend(px: &[f64], tol: f64) -> bool {
    let k = math::argmax_first(px);
    (0..k).any(|i| px[i] - px[i + 1] > tol) || (k..px.len() - 1).any(|i| px[i + 1] - px[i] > tol)
}

/// Percentage of pixels whose focus distribution is not unimodal.
pub fn invalid_focus_trend(p: &FocusProbabilityMap, tol: f64) -> f64 {
    let bad = p.iter_pixels().filter(|px| is_invalid_trend(px, tol)).count();
    100.0 * bad as f64 / p.pixels() as f64
}
