//! Integrable surface recovery from gradient fields.
//!
//! [`DiffOperator`] maps a scalar field to its forward differences. A
//! [`Projector`] solves the Tikhonov-regularized normal equations
//! `(PᵀP + λI) z = PᵀΓ` per channel and fixes the gauge by removing the mean,
//! so `P z` is the closest integrable field to `Γ`. The same factorization
//! serves the adjoint used for backpropagation.

mod cg;
mod dense;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub use cg::CG_TOLERANCE;
pub use dense::{matmul, Cholesky};

pub const DEFAULT_LAMBDA_REG: f64 = 1e-6;
pub const DEFAULT_SURFACE_SIZE: usize = 14;
pub const DEFAULT_SURFACE_CHANNELS: usize = 16;
/// Grids with at most this many pixels use the dense factorization.
pub const DENSE_MAX_PIXELS: usize = 32 * 32;

/// Forward-difference operator on a `width x height` grid.
///
/// Rows `0..HW` hold x-derivatives, rows `HW..2HW` y-derivatives; the row of
/// pixel `(x, y)` is `y * width + x` within each block. Last-column x-rows and
/// last-row y-rows are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffOperator {
    width: usize,
    height: usize,
}

impl DiffOperator {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::GridTooSmall { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cols(&self) -> usize {
        self.width * self.height
    }

    pub fn rows(&self) -> usize {
        2 * self.cols()
    }

    /// `out = P z`.
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        let (w, h) = (self.width, self.height);
        let hw = w * h;
        debug_assert_eq!(z.len(), hw);
        debug_assert_eq!(out.len(), 2 * hw);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                out[p] = if x + 1 < w { z[p + 1] - z[p] } else { 0.0 };
                out[hw + p] = if y + 1 < h { z[p + w] - z[p] } else { 0.0 };
            }
        }
    }

    /// `out = Pᵀ g`.
    pub fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        let (w, h) = (self.width, self.height);
        let hw = w * h;
        debug_assert_eq!(g.len(), 2 * hw);
        out.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    out[p] -= g[p];
                    out[p + 1] += g[p];
                }
                if y + 1 < h {
                    out[p] -= g[hw + p];
                    out[p + w] += g[hw + p];
                }
            }
        }
    }

    /// Nonzero coefficients as `(row, col, value)`.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let (w, h) = (self.width, self.height);
        let hw = w * h;
        let mut t = Vec::with_capacity(4 * hw);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    t.push((p, p, -1.0));
                    t.push((p, p + 1, 1.0));
                }
                if y + 1 < h {
                    t.push((hw + p, p, -1.0));
                    t.push((hw + p, p + w, 1.0));
                }
            }
        }
        t
    }

    /// Row-major dense matrix of size `rows x cols`.
    pub fn to_dense(&self) -> Vec<f64> {
        let cols = self.cols();
        let mut m = vec![0.0; self.rows() * cols];
        for (r, c, v) in self.triplets() {
            m[r * cols + c] = v;
        }
        m
    }

    /// Diagonal of `PᵀP`: the number of in-grid forward neighbours plus
    /// backward neighbours of each pixel.
    fn gram_diagonal(&self) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        (0..w * h)
            .map(|p| {
                let (x, y) = (p % w, p / w);
                [x + 1 < w, x > 0, y + 1 < h, y > 0].iter().filter(|&&b| b).count() as f64
            })
            .collect()
    }
}

/// Per-plane, per-channel x/y gradient fields. Channel `(n, c)` is stored as
/// the `2HW` vector `[gx; gy]` in [`DiffOperator`] row order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    width: usize,
    height: usize,
    channels: usize,
    planes: usize,
    data: Vec<f64>,
}

impl GradientField {
    pub fn zeros(width: usize, height: usize, channels: usize, planes: usize) -> Self {
        Self {
            width,
            height,
            channels,
            planes,
            data: vec![0.0; 2 * width * height * channels * planes],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, planes: usize, data: Vec<f64>) -> Result<Self> {
        let expected = 2 * width * height * channels * planes;
        if data.len() != expected {
            return Err(Error::CountMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            planes,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    fn stride(&self) -> usize {
        2 * self.width * self.height
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let s = self.stride();
        let i = n * self.channels + c;
        &self.data[i * s..(i + 1) * s]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let s = self.stride();
        let i = n * self.channels + c;
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Per-plane, per-channel scalar surfaces; every channel slice has zero mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceField {
    width: usize,
    height: usize,
    channels: usize,
    planes: usize,
    data: Vec<f64>,
}

impl SurfaceField {
    pub fn zeros(width: usize, height: usize, channels: usize, planes: usize) -> Self {
        Self {
            width,
            height,
            channels,
            planes,
            data: vec![0.0; width * height * channels * planes],
        }
    }

    /// Wraps `data` without re-centering.
    pub(crate) fn from_raw(
        width: usize,
        height: usize,
        channels: usize,
        planes: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = width * height * channels * planes;
        if data.len() != expected {
            return Err(Error::CountMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            planes,
            data,
        })
    }

    /// Wraps raw data; each channel slice is re-centered to zero mean.
    pub fn from_data(width: usize, height: usize, channels: usize, planes: usize, data: Vec<f64>) -> Result<Self> {
        let expected = width * height * channels * planes;
        if data.len() != expected {
            return Err(Error::CountMismatch {
                expected,
                found: data.len(),
            });
        }
        let mut s = Self {
            width,
            height,
            channels,
            planes,
            data,
        };
        for ch in s.data.chunks_exact_mut(width * height) {
            center(ch);
        }
        Ok(s)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let s = self.width * self.height;
        let i = n * self.channels + c;
        &self.data[i * s..(i + 1) * s]
    }

    /// All channels of plane `n`, channel-major.
    pub fn plane(&self, n: usize) -> &[f64] {
        let s = self.width * self.height * self.channels;
        &self.data[n * s..(n + 1) * s]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn center(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// Dense Cholesky up to [`DENSE_MAX_PIXELS`], conjugate gradients above.
    #[default]
    Auto,
    Dense,
    ConjugateGradient,
}

#[derive(Debug, Clone)]
enum Inner {
    Dense(Cholesky),
    Cg { diag: Vec<f64> },
}

/// Reusable solver for the regularized normal equations on one grid size.
///
/// The system matrix carries an extra `11ᵀ / HW` term. Right-hand sides of the
/// form `PᵀΓ` are orthogonal to constants, so the term leaves the solution
/// unchanged while making the matrix non-singular even for `λ = 0`.
#[derive(Debug, Clone)]
pub struct Projector {
    op: DiffOperator,
    lambda: f64,
    inner: Inner,
}

impl Projector {
    pub fn new(width: usize, height: usize, lambda: f64, backend: Backend) -> Result<Self> {
        let op = DiffOperator::new(width, height)?;
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda_reg must be finite and non-negative"));
        }
        let hw = op.cols();
        let dense = match backend {
            Backend::Auto => hw <= DENSE_MAX_PIXELS,
            Backend::Dense => true,
            Backend::ConjugateGradient => false,
        };
        let inner = if dense {
            let mut a = vec![1.0 / hw as f64; hw * hw];
            let mut col = vec![0.0; hw];
            let mut unit = vec![0.0; hw];
            let mut pz = vec![0.0; 2 * hw];
            for j in 0..hw {
                unit[j] = 1.0;
                op.apply(&unit, &mut pz);
                op.apply_transpose(&pz, &mut col);
                unit[j] = 0.0;
                for i in 0..hw {
                    a[i * hw + j] += col[i];
                }
                a[j * hw + j] += lambda;
            }
            Inner::Dense(Cholesky::factor(hw, a)?)
        } else {
            let diag = op
                .gram_diagonal()
                .into_iter()
                .map(|d| d + lambda + 1.0 / hw as f64)
                .collect();
            Inner::Cg { diag }
        };
        Ok(Self { op, lambda, inner })
    }

    pub fn operator(&self) -> &DiffOperator {
        &self.op
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.inner, Inner::Dense(_))
    }

    fn apply_system(&self, v: &[f64], out: &mut [f64]) {
        let hw = v.len();
        let mut pv = vec![0.0; 2 * hw];
        self.op.apply(v, &mut pv);
        self.op.apply_transpose(&pv, out);
        let mean = v.iter().sum::<f64>() / hw as f64;
        for (o, &x) in out.iter_mut().zip(v) {
            *o += self.lambda * x + mean;
        }
    }

    fn solve(&self, b: &mut [f64]) -> Result<()> {
        match &self.inner {
            Inner::Dense(ch) => {
                ch.solve_in_place(b);
                Ok(())
            }
            Inner::Cg { diag } => {
                let x = cg::pcg(|v, out| self.apply_system(v, out), diag, b, 20 * b.len() + 100)?;
                b.copy_from_slice(&x);
                Ok(())
            }
        }
    }

    /// Surface of one channel: `z = center((PᵀP + λI)⁻¹ Pᵀ Γ)`.
    pub fn project_channel(&self, gamma: &[f64], z: &mut [f64]) -> Result<()> {
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient field"));
        }
        self.op.apply_transpose(gamma, z);
        self.solve(z)?;
        center(z);
        Ok(())
    }

    /// Adjoint of [`Projector::project_channel`]: maps `∂L/∂z` to `∂L/∂Γ`.
    pub fn backward_channel(&self, grad_z: &[f64], grad_gamma: &mut [f64]) -> Result<()> {
        let mut y = grad_z.to_vec();
        center(&mut y);
        self.solve(&mut y)?;
        self.op.apply(&y, grad_gamma);
        Ok(())
    }

    /// `Pᵀ(P z − Γ) + λ z`, the gradient of the regularized objective (halved).
    pub fn normal_residual(&self, gamma: &[f64], z: &[f64]) -> Vec<f64> {
        let hw = z.len();
        let mut pz = vec![0.0; 2 * hw];
        self.op.apply(z, &mut pz);
        for (a, g) in pz.iter_mut().zip(gamma) {
            *a -= g;
        }
        let mut out = vec![0.0; hw];
        self.op.apply_transpose(&pz, &mut out);
        for (o, &x) in out.iter_mut().zip(z) {
            *o += self.lambda * x;
        }
        out
    }

    /// Projects every channel of `gamma`.
    pub fn project(&self, gamma: &GradientField) -> Result<SurfaceField> {
        if gamma.dims() != (self.op.width, self.op.height) {
            return Err(Error::DimensionMismatch {
                expected: (self.op.width, self.op.height),
                found: gamma.dims(),
            });
        }
        let mut out = SurfaceField::zeros(gamma.width, gamma.height, gamma.channels, gamma.planes);
        let hw = self.op.cols();
        if let Inner::Dense(ch) = &self.inner {
            if gamma.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient field"));
            }
            for (z, g) in out.data.chunks_exact_mut(hw).zip(gamma.data.chunks_exact(2 * hw)) {
                self.op.apply_transpose(g, z);
            }
            solve_columns(ch, &mut out.data, hw);
            out.data.chunks_exact_mut(hw).for_each(center);
            return Ok(out);
        }
        for (i, z) in out.data.chunks_exact_mut(hw).enumerate() {
            let g = &gamma.data[i * 2 * hw..(i + 1) * 2 * hw];
            self.project_channel(g, z)?;
        }
        Ok(out)
    }

    /// Pulls per-channel surface gradients back to gradient-field gradients.
    pub fn backward(&self, grad_z: &[f64], grad_gamma: &mut GradientField) -> Result<()> {
        let hw = self.op.cols();
        if let Inner::Dense(ch) = &self.inner {
            let mut y = grad_z.to_vec();
            y.chunks_exact_mut(hw).for_each(center);
            solve_columns(ch, &mut y, hw);
            for (v, gg) in y.chunks_exact(hw).zip(grad_gamma.data.chunks_exact_mut(2 * hw)) {
                self.op.apply(v, gg);
            }
            return Ok(());
        }
        for (i, gz) in grad_z.chunks_exact(hw).enumerate() {
            let gg = &mut grad_gamma.data[i * 2 * hw..(i + 1) * 2 * hw];
            self.backward_channel(gz, gg)?;
        }
        Ok(())
    }
}

/// Solves every length-`hw` block of `data` against the factor in one pass.
fn solve_columns(ch: &Cholesky, data: &mut [f64], hw: usize) {
    let m = data.len() / hw;
    let mut t = vec![0.0; data.len()];
    for (j, col) in data.chunks_exact(hw).enumerate() {
        for (i, v) in col.iter().enumerate() {
            t[i * m + j] = *v;
        }
    }
    ch.solve_many(&mut t, m);
    for (j, col) in data.chunks_exact_mut(hw).enumerate() {
        for (i, v) in col.iter_mut().enumerate() {
            *v = t[i * m + j];
        }
    }
}

/// Projects `gamma` onto integrable fields with the automatic backend.
pub fn integrability_project(gamma: &GradientField, lambda_reg: f64) -> Result<SurfaceField> {
    integrability_project_with(gamma, lambda_reg, Backend::Auto)
}

pub fn integrability_project_with(gamma: &GradientField, lambda_reg: f64, backend: Backend) -> Result<SurfaceField> {
    let (w, h) = gamma.dims();
    Projector::new(w, h, lambda_reg, backend)?.project(gamma)
}

/// Forward differences of every surface channel.
pub fn grad_of_surface(z: &SurfaceField) -> Result<GradientField> {
    let op = DiffOperator::new(z.width, z.height)?;
    let hw = op.cols();
    let mut out = GradientField::zeros(z.width, z.height, z.channels, z.planes);
    for (src, dst) in z.data.chunks_exact(hw).zip(out.data.chunks_exact_mut(2 * hw)) {
        op.apply(src, dst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_hand_expansion() {
        let op = DiffOperator::new(2, 2).unwrap();
        assert_eq!((op.rows(), op.cols()), (8, 4));
        let (a, b, c, d) = (1.5, -2.0, 4.0, 0.25);
        let mut out = [0.0; 8];
        op.apply(&[a, b, c, d], &mut out);
        assert_eq!(out, [b - a, 0.0, d - c, 0.0, c - a, d - b, 0.0, 0.0]);
    }

    #[test]
    fn rows_are_differences() {
        let op = DiffOperator::new(5, 3).unwrap();
        let dense = op.to_dense();
        let cols = op.cols();
        for row in dense.chunks_exact(cols) {
            let nz: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
            assert!(nz.is_empty() || (nz.len() == 2 && nz.iter().sum::<f64>() == 0.0));
            assert!(row.iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
        }
    }

    #[test]
    fn constant_and_ramp() {
        let op = DiffOperator::new(4, 3).unwrap();
        let mut out = vec![0.0; op.rows()];
        op.apply(&[2.5; 12], &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
        let ramp: Vec<f64> = (0..12).map(|p| (p % 4) as f64).collect();
        op.apply(&ramp, &mut out);
        for p in 0..12 {
            assert_eq!(out[p], if p % 4 < 3 { 1.0 } else { 0.0 });
            assert_eq!(out[12 + p], 0.0);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let op = DiffOperator::new(3, 4).unwrap();
        let z: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..24).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut pz = vec![0.0; 24];
        let mut ptg = vec![0.0; 12];
        op.apply(&z, &mut pz);
        op.apply_transpose(&g, &mut ptg);
        let lhs: f64 = pz.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = z.iter().zip(&ptg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn too_small_grid() {
        assert!(matches!(DiffOperator::new(1, 5), Err(Error::GridTooSmall { .. })));
    }

    #[test]
    fn zero_gradient_gives_zero_surface() {
        let g = GradientField::zeros(5, 4, 2, 3);
        let z = integrability_project(&g, DEFAULT_LAMBDA_REG).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = GradientField::zeros(3, 3, 1, 1);
        g.data_mut()[4] = f64::NAN;
        assert_eq!(
            integrability_project(&g, DEFAULT_LAMBDA_REG).unwrap_err(),
            Error::NonFinite("gradient field")
        );
        assert!(integrability_project(&GradientField::zeros(3, 3, 1, 1), -1.0).is_err());
    }

    #[test]
    fn lambda_zero_is_supported() {
        let mut g = GradientField::zeros(4, 4, 1, 1);
        g.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64).sin());
        let z = integrability_project(&g, 0.0).unwrap();
        let p = Projector::new(4, 4, 0.0, Backend::Dense).unwrap();
        let r = p.normal_residual(g.channel(0, 0), z.channel(0, 0));
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }
}
