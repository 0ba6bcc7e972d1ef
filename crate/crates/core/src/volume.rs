//! Focus volumes and classical per-plane sharpness.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::math;
use crate::types::FocalStack;

pub const DEFAULT_SHARPNESS_WINDOW: usize = 5;

/// Per-plane features augmented with their change along the focal axis.
///
/// Plane `n` carries `[V_n, V_{n+1} - V_n]` for every plane but the last,
/// which carries `[V_N, V_N - V_{N-1}]`. Storage is `[plane][pixel][channel]`
/// with `2 * base_channels` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusVolume {
    width: usize,
    height: usize,
    base_channels: usize,
    planes: usize,
    data: Vec<f64>,
}

impl FocusVolume {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn channels(&self) -> usize {
        2 * self.base_channels
    }

    #[inline]
    pub fn get(&self, n: usize, x: usize, y: usize, c: usize) -> f64 {
        let ch = self.channels();
        self.data[((n * self.height + y) * self.width + x) * ch + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Concatenates each plane's features with their focal difference.
pub fn build_focus_volume(base_features: &[Image]) -> Result<FocusVolume> {
    let n = base_features.len();
    if n < 2 {
        return Err(Error::TooFewPlanes(n));
    }
    let first = &base_features[0];
    for f in base_features {
        if f.dims() != first.dims() {
            return Err(Error::DimensionMismatch {
                expected: first.dims(),
                found: f.dims(),
            });
        }
        if f.channels() != first.channels() {
            return Err(Error::ChannelMismatch {
                expected: first.channels(),
                found: f.channels(),
            });
        }
    }
    let (w, h) = first.dims();
    let c1 = first.channels();
    let mut data = Vec::with_capacity(n * w * h * 2 * c1);
    for plane in 0..n {
        let (from, to) = if plane + 1 < n {
            (plane, plane + 1)
        } else {
            (plane - 1, plane)
        };
        let cur = base_features[plane].data();
        let a = base_features[from].data();
        let b = base_features[to].data();
        for px in 0..w * h {
            let off = px * c1;
            data.extend_from_slice(&cur[off..off + c1]);
            data.extend((0..c1).map(|c| b[off + c] - a[off + c]));
        }
    }
    Ok(FocusVolume {
        width: w,
        height: h,
        base_channels: c1,
        planes: n,
        data,
    })
}

/// Sobel responses with replicate padding.
pub fn sobel(g: &Grid) -> (Grid, Grid) {
    let (w, h) = g.dims();
    let at = |x: usize, y: usize, dx: isize, dy: isize| g.get_clamped(x as isize + dx, y as isize + dy);
    let gx = Grid::from_fn(w, h, |x, y| {
        (at(x, y, 1, -1) + 2.0 * at(x, y, 1, 0) + at(x, y, 1, 1))
            - (at(x, y, -1, -1) + 2.0 * at(x, y, -1, 0) + at(x, y, -1, 1))
    });
    let gy = Grid::from_fn(w, h, |x, y| {
        (at(x, y, -1, 1) + 2.0 * at(x, y, 0, 1) + at(x, y, 1, 1))
            - (at(x, y, -1, -1) + 2.0 * at(x, y, 0, -1) + at(x, y, 1, -1))
    });
    (gx, gy)
}

/// Four-neighbour discrete Laplacian with replicate padding.
pub fn laplacian(g: &Grid) -> Grid {
    let (w, h) = g.dims();
    Grid::from_fn(w, h, |x, y| {
        let (xi, yi) = (x as isize, y as isize);
        g.get_clamped(xi - 1, yi) + g.get_clamped(xi + 1, yi) + g.get_clamped(xi, yi - 1) + g.get_clamped(xi, yi + 1)
            - 4.0 * g.get(x, y)
    })
}

/// Gray intensity plus Sobel gradient magnitude for every plane.
pub fn base_features(stack: &FocalStack) -> Vec<Image> {
    stack
        .gray_planes()
        .into_iter()
        .map(|g| {
            let (gx, gy) = sobel(&g);
            let mag = Grid::new(
                g.width(),
                g.height(),
                gx.data()
                    .iter()
                    .zip(gy.data())
                    .map(|(a, b)| math::sqrt(a * a + b * b))
                    .collect(),
            )
            .expect("sizes agree");
            Image::from_channels(&[g, mag]).expect("sizes agree")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SharpnessKind {
    /// Squared four-neighbour Laplacian.
    #[default]
    LaplacianSq,
    /// Squared Sobel gradient magnitude.
    Tenengrad,
}

/// Non-negative focus measure per pixel and plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessVolume {
    planes: Vec<Grid>,
}

impl SharpnessVolume {
    pub fn from_planes(planes: Vec<Grid>) -> Result<Self> {
        let first = planes.first().ok_or(Error::TooFewPlanes(0))?;
        for p in &planes {
            if p.dims() != first.dims() {
                return Err(Error::DimensionMismatch {
                    expected: first.dims(),
                    found: p.dims(),
                });
            }
            if p.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::NonFinite("sharpness must be finite and non-negative"));
            }
        }
        Ok(Self { planes })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.planes[0].dims()
    }

    pub fn planes(&self) -> usize {
        self.planes.len()
    }

    pub fn plane(&self, n: usize) -> &Grid {
        &self.planes[n]
    }

    /// Values of one pixel (row-major index) across planes.
    pub fn pixel(&self, idx: usize) -> Vec<f64> {
        self.planes.iter().map(|p| p.data()[idx]).collect()
    }
}

/// Per-plane focus measure of the gray stack, box-smoothed with `window`.
pub fn sharpness_measure(stack: &FocalStack, kind: SharpnessKind, window: usize) -> Result<SharpnessVolume> {
    if window.is_multiple_of(2) {
        return Err(Error::InvalidConfig("sharpness window must be odd"));
    }
    let planes = stack
        .gray_planes()
        .iter()
        .map(|g| {
            let raw = match kind {
                SharpnessKind::LaplacianSq => laplacian(g).map(|v| v * v),
                SharpnessKind::Tenengrad => {
                    let (gx, gy) = sobel(g);
                    Grid::new(
                        g.width(),
                        g.height(),
                        gx.data().iter().zip(gy.data()).map(|(a, b)| a * a + b * b).collect(),
                    )
                    .expect("sizes agree")
                }
            };
            raw.box_filter(window)
        })
        .collect();
    SharpnessVolume::from_planes(planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn stack_of(planes: Vec<Grid>) -> FocalStack {
        let f = (1..=planes.len()).map(|i| i as f64).collect();
        FocalStack::new(planes.into_iter().map(Image::from_gray).collect(), f).unwrap()
    }

    #[test]
    fn constant_features_have_zero_differences() {
        let f = vec![Image::from_gray(Grid::filled(3, 3, 0.4)); 4];
        let v = build_focus_volume(&f).unwrap();
        assert_eq!(v.channels(), 2);
        for n in 0..4 {
            assert_eq!(v.get(n, 1, 1, 1), 0.0);
            assert_eq!(v.get(n, 1, 1, 0), 0.4);
        }
    }

    #[test]
    fn two_planes_share_difference() {
        let a = Image::from_gray(Grid::filled(2, 2, 1.0));
        let b = Image::from_gray(Grid::filled(2, 2, 3.5));
        let v = build_focus_volume(&[a, b]).unwrap();
        assert_eq!(v.get(0, 0, 0, 1), 2.5);
        assert_eq!(v.get(1, 0, 0, 1), 2.5);
        assert_eq!(v.get(1, 0, 0, 0), 3.5);
    }

    #[test]
    fn volume_needs_two_planes() {
        let a = Image::from_gray(Grid::filled(2, 2, 1.0));
        assert_eq!(build_focus_volume(&[a]).unwrap_err(), Error::TooFewPlanes(1));
    }

    #[test]
    fn constant_image_has_no_sharpness() {
        let s = stack_of(vec![Grid::filled(6, 6, 0.7); 2]);
        for kind in [SharpnessKind::LaplacianSq, SharpnessKind::Tenengrad] {
            let v = sharpness_measure(&s, kind, 5).unwrap();
            assert!(v.plane(0).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn impulse_laplacian_squared() {
        let mut g = Grid::filled(5, 5, 0.0);
        g.set(2, 2, 1.0);
        let v = sharpness_measure(&stack_of(vec![g.clone(), g]), SharpnessKind::LaplacianSq, 1).unwrap();
        let p = v.plane(0);
        assert_eq!(p.get(2, 2), 16.0);
        for (x, y) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(p.get(x, y), 1.0);
        }
        assert_eq!(p.get(1, 1), 0.0);
    }

    #[test]
    fn even_window_rejected() {
        let s = stack_of(vec![Grid::filled(4, 4, 0.0); 2]);
        assert!(sharpness_measure(&s, SharpnessKind::LaplacianSq, 4).is_err());
    }
}
