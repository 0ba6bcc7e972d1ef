//! Focal stacks, depth maps and per-pixel focus distributions.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};

/// `N >= 2` images of one scene ordered by strictly increasing focal distance.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalStack {
    planes: Vec<Image>,
    focal_distances: Vec<f64>,
}

impl FocalStack {
    pub fn new(planes: Vec<Image>, focal_distances: Vec<f64>) -> Result<Self> {
        if planes.len() != focal_distances.len() {
            return Err(Error::CountMismatch {
                expected: focal_distances.len(),
                found: planes.len(),
            });
        }
        validate_focal_distances(&focal_distances)?;
        let first = &planes[0];
        if !matches!(first.channels(), 1 | 3) {
            return Err(Error::UnsupportedChannels(first.channels()));
        }
        for p in &planes {
            if p.dims() != first.dims() {
                return Err(Error::DimensionMismatch {
                    expected: first.dims(),
                    found: p.dims(),
                });
            }
            if p.channels() != first.channels() {
                return Err(Error::ChannelMismatch {
                    expected: first.channels(),
                    found: p.channels(),
                });
            }
            if let Some(&bad) = p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(if bad.is_finite() {
                    Error::PixelOutOfRange { value: bad }
                } else {
                    Error::NonFinite("focal stack pixels")
                });
            }
        }
        Ok(Self {
            planes,
            focal_distances,
        })
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.planes[0].dims()
    }

    pub fn channels(&self) -> usize {
        self.planes[0].channels()
    }

    pub fn planes(&self) -> &[Image] {
        &self.planes
    }

    pub fn focal_distances(&self) -> &[f64] {
        &self.focal_distances
    }

    pub fn gray_planes(&self) -> Vec<Grid> {
        self.planes.iter().map(Image::to_gray).collect()
    }
}

/// Checks `N >= 2`, finiteness, positivity and strict increase.
pub fn validate_focal_distances(f: &[f64]) -> Result<()> {
    if f.len() < 2 {
        return Err(Error::TooFewPlanes(f.len()));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("focal distances"));
    }
    if f[0] <= 0.0 {
        return Err(Error::Domain("focal distances must be positive"));
    }
    if f.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::NonIncreasingFocalDistances);
    }
    Ok(())
}

/// Depth in meters with a validity mask. Valid entries are finite and `> 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

#[inline]
fn is_measurement(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl DepthMap {
    /// Builds a map whose mask marks every finite positive value as valid.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::CountMismatch {
                expected: width * height,
                found: values.len(),
            });
        }
        let mask = values.iter().map(|&v| is_measurement(v)).collect();
        Ok(Self {
            width,
            height,
            values,
            mask,
        })
    }

    /// Builds a map from explicit values and mask; masked-valid entries that
    /// are not measurements are demoted to invalid.
    pub fn with_mask(width: usize, height: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != values.len() {
            return Err(Error::CountMismatch {
                expected: values.len(),
                found: mask.len(),
            });
        }
        let mut map = Self::new(width, height, values)?;
        for (m, keep) in map.mask.iter_mut().zip(mask) {
            *m = *m && keep;
        }
        Ok(map)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("sizes agree")
    }

    pub fn from_grid(grid: &Grid) -> Self {
        Self::new(grid.width(), grid.height(), grid.data().to_vec()).expect("sizes agree")
    }

    /// Re-applies the validity rule to the current mask.
    pub fn revalidate(&self) -> Self {
        Self::with_mask(self.width, self.height, self.values.clone(), self.mask.clone()).expect("sizes agree")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn require_valid(&self) -> Result<()> {
        if self.valid_count() == 0 {
            Err(Error::EmptyMask)
        } else {
            Ok(())
        }
    }

    /// Smallest and largest valid depth.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold(None, |acc, (&v, _)| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    pub fn crop(&self, margin: usize) -> Result<Self> {
        let g = Grid::new(self.width, self.height, self.values.clone())?.crop(margin)?;
        let (w, h) = g.dims();
        let mask = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| self.is_valid(x + margin, y + margin))
            .collect();
        Self::with_mask(w, h, g.into_data(), mask)
    }

    /// Area-weighted average over valid source pixels onto a coarser
    /// `width x height` grid. Target cells covering no valid pixel are invalid.
    pub fn area_downsample(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || width > self.width || height > self.height {
            return Err(Error::DimensionMismatch {
                expected: (self.width, self.height),
                found: (width, height),
            });
        }
        let wx = area_weights(self.width, width);
        let wy = area_weights(self.height, height);
        let mut values = vec![0.0; width * height];
        let mut mask = vec![false; width * height];
        for ty in 0..height {
            for tx in 0..width {
                let (mut num, mut den) = (0.0, 0.0);
                for &(sy, wgt_y) in &wy[ty] {
                    for &(sx, wgt_x) in &wx[tx] {
                        let i = sy * self.width + sx;
                        if self.mask[i] {
                            let wgt = wgt_x * wgt_y;
                            num += wgt * self.values[i];
                            den += wgt;
                        }
                    }
                }
                if den > 0.0 {
                    values[ty * width + tx] = num / den;
                    mask[ty * width + tx] = true;
                }
            }
        }
        Self::with_mask(width, height, values, mask)
    }
}

/// For each target cell, the source indices it overlaps and the overlap length.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let lo = t as f64 * scale;
            let hi = (t + 1) as f64 * scale;
            let first = crate::math::floor(lo) as usize;
            let mut cells = Vec::new();
            let mut s = first;
            while (s as f64) < hi && s < src {
                let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    cells.push((s, overlap));
                }
                s += 1;
            }
            cells
        })
        .collect()
}

/// Per-pixel distribution over focal planes, stored pixel-major
/// (`probs[pixel * planes + n]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FocusProbabilityMap {
    width: usize,
    height: usize,
    planes: usize,
    probs: Vec<f64>,
}

/// Tolerance on the per-pixel sum of a probability map.
pub const PROB_SUM_TOL: f64 = 1e-6;

impl FocusProbabilityMap {
    pub fn new(width: usize, height: usize, planes: usize, probs: Vec<f64>) -> Result<Self> {
        if planes < 2 {
            return Err(Error::TooFewPlanes(planes));
        }
        if probs.len() != width * height * planes {
            return Err(Error::CountMismatch {
                expected: width * height * planes,
                found: probs.len(),
            });
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidProbabilities("entry outside [0, 1]"));
        }
        for px in probs.chunks_exact(planes) {
            if (px.iter().sum::<f64>() - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidProbabilities("pixel distribution does not sum to 1"));
            }
        }
        Ok(Self {
            width,
            height,
            planes,
            probs,
        })
    }

    pub(crate) fn from_parts_unchecked(width: usize, height: usize, planes: usize, probs: Vec<f64>) -> Self {
        Self {
            width,
            height,
            planes,
            probs,
        }
    }

    pub fn uniform(width: usize, height: usize, planes: usize) -> Self {
        Self::from_parts_unchecked(
            width,
            height,
            planes,
            vec![1.0 / planes as f64; width * height * planes],
        )
    }

    /// Same distribution at every pixel.
    pub fn broadcast(width: usize, height: usize, dist: &[f64]) -> Result<Self> {
        let mut probs = Vec::with_capacity(width * height * dist.len());
        for _ in 0..width * height {
            probs.extend_from_slice(dist);
        }
        Self::new(width, height, dist.len(), probs)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.probs[idx * self.planes..(idx + 1) * self.planes]
    }

    pub fn iter_pixels(&self) -> core::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.planes)
    }
}
