//! Dense row-major grids and multi-channel images.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Luma weights used for every RGB to gray conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A single-channel `width x height` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::CountMismatch {
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with replicate padding.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mean over a `window x window` neighbourhood with replicate padding.
    /// `window` must be odd; a window of 1 is the identity.
    pub fn box_filter(&self, window: usize) -> Self {
        assert!(window % 2 == 1, "box window must be odd");
        if window == 1 {
            return self.clone();
        }
        let r = (window / 2) as isize;
        let (w, h) = (self.width, self.height);
        // Separable: horizontal then vertical pass.
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dx in -r..=r {
                    acc += self.get_clamped(x as isize + dx, y as isize);
                }
                tmp[y * w + x] = acc;
            }
        }
        let tmp = Grid {
            width: w,
            height: h,
            data: tmp,
        };
        let norm = (window * window) as f64;
        Grid::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            for dy in -r..=r {
                acc += tmp.get_clamped(x as isize, y as isize + dy);
            }
            acc / norm
        })
    }

    pub fn crop(&self, margin: usize) -> Result<Self> {
        let (w, h) = (self.width, self.height);
        if 2 * margin + 2 > w || 2 * margin + 2 > h {
            return Err(Error::GridTooSmall {
                width: w.saturating_sub(2 * margin),
                height: h.saturating_sub(2 * margin),
            });
        }
        Ok(Grid::from_fn(w - 2 * margin, h - 2 * margin, |x, y| {
            self.get(x + margin, y + margin)
        }))
    }

    pub fn mean(&self) -> f64 {
        crate::math::pairwise_sum(&self.data) / self.data.len() as f64
    }
}

/// A `width x height` image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::UnsupportedChannels(0));
        }
        if data.len() != width * height * channels {
            return Err(Error::CountMismatch {
                expected: width * height * channels,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_channels(planes: &[Grid]) -> Result<Self> {
        let first = planes.first().ok_or(Error::UnsupportedChannels(0))?;
        let (w, h) = first.dims();
        for p in planes {
            if p.dims() != (w, h) {
                return Err(Error::DimensionMismatch {
                    expected: (w, h),
                    found: p.dims(),
                });
            }
        }
        let c = planes.len();
        let mut data = vec![0.0; w * h * c];
        for (ch, p) in planes.iter().enumerate() {
            for (i, &v) in p.data().iter().enumerate() {
                data[i * c + ch] = v;
            }
        }
        Self::new(w, h, c, data)
    }

    pub fn from_gray(grid: Grid) -> Self {
        let (w, h) = grid.dims();
        Self {
            width: w,
            height: h,
            channels: 1,
            data: grid.into_data(),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> Grid {
        let stride = self.channels;
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().skip(c).step_by(stride).copied().collect(),
        }
    }

    pub fn split_channels(&self) -> Vec<Grid> {
        (0..self.channels).map(|c| self.channel(c)).collect()
    }

    /// Gray conversion: identity for one channel, luma for three, plain
    /// channel mean otherwise.
    pub fn to_gray(&self) -> Grid {
        match self.channels {
            1 => self.channel(0),
            3 => Grid::from_fn(self.width, self.height, |x, y| {
                LUMA[0] * self.get(x, y, 0) + LUMA[1] * self.get(x, y, 1) + LUMA[2] * self.get(x, y, 2)
            }),
            c => Grid::from_fn(self.width, self.height, |x, y| {
                (0..c).map(|k| self.get(x, y, k)).sum::<f64>() / c as f64
            }),
        }
    }

    pub fn crop(&self, margin: usize) -> Result<Self> {
        let planes = self
            .split_channels()
            .iter()
            .map(|g| g.crop(margin))
            .collect::<Result<Vec<_>>>()?;
        Self::from_channels(&planes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_filter_of_constant_is_constant() {
        let g = Grid::filled(7, 5, 0.3);
        let b = g.box_filter(5);
        assert!(b.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn channels_round_trip() {
        let a = Grid::from_fn(3, 2, |x, y| (x + 10 * y) as f64);
        let b = a.map(|v| -v);
        let img = Image::from_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(img.channel(0), a);
        assert_eq!(img.channel(1), b);
        assert_eq!(img.get(2, 1, 1), -12.0);
    }

    #[test]
    fn gray_uses_luma() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(img.to_gray().get(0, 0), 0.299);
    }

    #[test]
    fn crop_removes_border() {
        let g = Grid::from_fn(6, 6, |x, y| (x * 10 + y) as f64);
        let c = g.crop(1).unwrap();
        assert_eq!(c.dims(), (4, 4));
        assert_eq!(c.get(0, 0), 11.0);
        assert_eq!(g.crop(2).unwrap().dims(), (2, 2));
        assert!(g.crop(3).is_err());
    }
}
