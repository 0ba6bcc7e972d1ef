//! Focal-stack rendering from an all-in-focus image and a depth map.
//!
//! Blur follows the thin-lens circle of confusion. Depth is quantized into
//! layers; each layer is blurred with a hard-edged disc and the layers are
//! composited back to front.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::math;
use crate::types::{validate_focal_distances, DepthMap, FocalStack};

pub const DEFAULT_MAX_COC_PX: usize = 31;
pub const DEFAULT_LAYERS: usize = 16;

/// Thin-lens camera. Distances are in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraParams {
    pub focal_length: f64,
    pub f_number: f64,
    /// Sensor meters per pixel; converts a CoC diameter to pixels.
    pub pixel_pitch: f64,
    /// Upper bound on the blur radius in pixels.
    pub max_coc_px: usize,
}

impl CameraParams {
    pub fn new(focal_length: f64, f_number: f64, pixel_pitch: f64) -> Self {
        Self {
            focal_length,
            f_number,
            pixel_pitch,
            max_coc_px: DEFAULT_MAX_COC_PX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.focal_length) {
            return Err(Error::InvalidConfig("focal length must be positive"));
        }
        if !ok(self.f_number) {
            return Err(Error::InvalidConfig("f-number must be positive"));
        }
        if !ok(self.pixel_pitch) {
            return Err(Error::InvalidConfig("pixel pitch must be positive"));
        }
        Ok(())
    }

    /// Disc radius in pixels for a CoC diameter: `round(c / (2 * pitch))`,
    /// clamped to `max_coc_px`.
    pub fn radius_px(&self, coc: f64) -> usize {
        let r = math::round(coc / (2.0 * self.pixel_pitch));
        if r <= 0.0 {
            0
        } else {
            (r as usize).min(self.max_coc_px)
        }
    }
}

/// CoC diameter for a point at `object` meters when the lens is focused at
/// `focus` meters: `|S2 - S1| / S2 * f^2 / (N * (S1 - f))`.
pub fn coc_diameter(focus: f64, object: f64, cam: &CameraParams) -> Result<f64> {
    cam.validate()?;
    if !focus.is_finite() || focus <= cam.focal_length {
        return Err(Error::Domain("focus distance must exceed the focal length"));
    }
    if !object.is_finite() || object <= 0.0 {
        return Err(Error::Domain("object distance must be positive"));
    }
    let f = cam.focal_length;
    Ok((object - focus).abs() / object * (f * f) / (cam.f_number * (focus - f)))
}

/// Offsets `(dy, half_width)` describing the rows of a disc of `radius`:
/// pixel `(dx, dy)` is inside iff `dx^2 + dy^2 <= radius^2`.
fn disc_rows(radius: usize) -> Vec<(isize, usize)> {
    let r = radius as isize;
    (-r..=r)
        .map(|dy| {
            let rem = (r * r - dy * dy) as f64;
            (dy, math::floor(math::sqrt(rem) + 1e-9) as usize)
        })
        .collect()
}

/// Normalized disc kernel as a dense `(2r+1) x (2r+1)` grid.
pub fn disc_kernel(radius: usize) -> Grid {
    let size = 2 * radius + 1;
    let r2 = (radius * radius) as isize;
    let c = radius as isize;
    let mut k = Grid::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as isize - c, y as isize - c);
        if dx * dx + dy * dy <= r2 {
            1.0
        } else {
            0.0
        }
    });
    let total: f64 = k.data().iter().sum();
    for v in k.data_mut() {
        *v /= total;
    }
    k
}

/// Convolves with a normalized disc using replicate padding. Radius 0 returns
/// an exact copy.
pub fn disc_blur(src: &Grid, radius: usize) -> Grid {
    if radius == 0 {
        return src.clone();
    }
    let (w, h) = src.dims();
    let rows = disc_rows(radius);
    let count: usize = rows.iter().map(|&(_, s)| 2 * s + 1).sum();
    let norm = 1.0 / count as f64;
    let r = radius as isize;
    // prefix[y][k] = sum of padded row y over padded columns [0, k)
    let pw = w + 2 * radius;
    let mut prefix = vec![0.0; h * (pw + 1)];
    for y in 0..h {
        let base = y * (pw + 1);
        for k in 0..pw {
            let v = src.get_clamped(k as isize - r, y as isize);
            prefix[base + k + 1] = prefix[base + k] + v;
        }
    }
    Grid::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        for &(dy, s) in &rows {
            let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            let base = sy * (pw + 1);
            // padded column of x is x + radius
            let lo = x + radius - s;
            let hi = x + radius + s + 1;
            acc += prefix[base + hi] - prefix[base + lo];
        }
        acc * norm
    })
}

/// A depth layer: member pixels and the depth used for their blur.
#[derive(Debug, Clone)]
struct Layer {
    mask: Grid,
    depth: f64,
}

/// Uniform bins between the valid depth extremes. Invalid pixels join the
/// farthest layer. Each layer blurs with the mean depth of its members.
fn build_layers(depth: &DepthMap, layers: usize) -> Result<Vec<Layer>> {
    let (lo, hi) = depth.valid_range().ok_or(Error::EmptyMask)?;
    let (w, h) = depth.dims();
    let span = hi - lo;
    let bins = if span > 0.0 { layers } else { 1 };
    let mut assign = vec![0usize; w * h];
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for (i, (&d, &valid)) in depth.values().iter().zip(depth.mask()).enumerate() {
        let (b, d) = if !valid {
            (bins - 1, hi)
        } else if bins == 1 {
            (0, d)
        } else {
            let t = ((d - lo) / span * bins as f64) as usize;
            (t.min(bins - 1), d)
        };
        assign[i] = b;
        sums[b] += d;
        counts[b] += 1;
    }
    Ok((0..bins)
        .filter(|&b| counts[b] > 0)
        .map(|b| {
            let mask =
                Grid::new(w, h, assign.iter().map(|&a| if a == b { 1.0 } else { 0.0 }).collect()).expect("sizes agree");
            Layer {
                mask,
                depth: sums[b] / counts[b] as f64,
            }
        })
        .collect())
}

/// Renders one plane focused at `focus`.
fn render_plane(channels: &[Grid], layers: &[Layer], focus: f64, cam: &CameraParams) -> Result<Vec<Grid>> {
    let (w, h) = channels[0].dims();
    let mut acc_color = vec![Grid::filled(w, h, 0.0); channels.len()];
    let mut acc_alpha = Grid::filled(w, h, 0.0);
    let mut in_focus = vec![false; w * h];
    // Layers are ordered near to far; composite far first.
    for layer in layers.iter().rev() {
        let radius = cam.radius_px(coc_diameter(focus, layer.depth, cam)?);
        if radius == 0 {
            for (f, &m) in in_focus.iter_mut().zip(layer.mask.data()) {
                *f |= m > 0.0;
            }
        }
        let alpha = disc_blur(&layer.mask, radius);
        for (acc, ch) in acc_color.iter_mut().zip(channels) {
            let premul = Grid::new(
                w,
                h,
                ch.data().iter().zip(layer.mask.data()).map(|(c, m)| c * m).collect(),
            )?;
            let blurred = disc_blur(&premul, radius);
            for ((a, &b), &al) in acc.data_mut().iter_mut().zip(blurred.data()).zip(alpha.data()) {
                *a = b + (1.0 - al) * *a;
            }
        }
        for (a, &al) in acc_alpha.data_mut().iter_mut().zip(alpha.data()) {
            *a = al + (1.0 - al) * *a;
        }
    }
    Ok(acc_color
        .into_iter()
        .zip(channels)
        .map(|(acc, src)| {
            let data = acc
                .data()
                .iter()
                .zip(acc_alpha.data())
                .zip(src.data())
                .zip(&in_focus)
                .map(
                    |(((&c, &a), &s), &sharp)| {
                        if sharp || a <= 0.0 {
                            s
                        } else {
                            (c / a).clamp(0.0, 1.0)
                        }
                    },
                )
                .collect();
            Grid::new(w, h, data).expect("sizes agree")
        })
        .collect())
}

/// Renders an `N`-plane focal stack of `rgb` (one or three channels) seen at
/// `depth`, focused at each of `focus_distances`.
///
/// Pixels in a layer whose CoC rounds to radius 0 are copied from `rgb`
/// bit-for-bit.
pub fn synthesize_stack(
    rgb: &Image,
    depth: &DepthMap,
    focus_distances: &[f64],
    cam: &CameraParams,
    layers: usize,
) -> Result<FocalStack> {
    if rgb.dims() != depth.dims() {
        return Err(Error::DimensionMismatch {
            expected: rgb.dims(),
            found: depth.dims(),
        });
    }
    cam.validate()?;
    validate_focal_distances(focus_distances)?;
    if layers < 2 {
        return Err(Error::InvalidConfig("layers must be at least 2"));
    }
    let layer_set = build_layers(depth, layers)?;
    let channels = rgb.split_channels();
    let planes = focus_distances
        .iter()
        .map(|&focus| Image::from_channels(&render_plane(&channels, &layer_set, focus, cam)?))
        .collect::<Result<Vec<_>>>()?;
    FocalStack::new(planes, focus_distances.to_vec())
}
