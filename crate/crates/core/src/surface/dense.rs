use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Lower-triangular Cholesky factor of a dense SPD matrix, row-major.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
    /// `Lᵀ`, so both triangular solves walk contiguous rows.
    lt: Vec<f64>,
}

impl Cholesky {
    pub fn factor(n: usize, mut a: Vec<f64>) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= a[j * n + k] * a[j * n + k];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::SolverFailed("matrix is not positive definite"));
            }
            let d = math::sqrt(d);
            a[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= a[i * n + k] * a[j * n + k];
                }
                a[i * n + j] = s / d;
            }
            for k in j + 1..n {
                a[j * n + k] = 0.0;
            }
        }
        let mut lt = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                lt[j * n + i] = a[i * n + j];
            }
        }
        Ok(Self { n, l: a, lt })
    }

    /// Solves `L L^T x = b` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        let l = &self.l;
        for i in 0..n {
            let row = &l[i * n..i * n + i];
            let s = math::dot(row, &x[..i]);
            x[i] = (x[i] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let row = &self.lt[i * n + i + 1..(i + 1) * n];
            let s = math::dot(row, &x[i + 1..]);
            x[i] = (x[i] - s) / l[i * n + i];
        }
    }

    /// Solves for `m` right-hand sides at once; `x` is row-major `n × m`.
    pub fn solve_many(&self, x: &mut [f64], m: usize) {
        let n = self.n;
        assert_eq!(x.len(), n * m);
        let l = &self.l;
        for i in 0..n {
            let (done, rest) = x.split_at_mut(i * m);
            let xi = &mut rest[..m];
            for k in 0..i {
                let c = l[i * n + k];
                for (a, b) in xi.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                    *a -= c * b;
                }
            }
            let d = l[i * n + i];
            xi.iter_mut().for_each(|v| *v /= d);
        }
        for i in (0..n).rev() {
            let (head, tail) = x.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for k in i + 1..n {
                let c = self.lt[i * n + k];
                for (a, b) in xi.iter_mut().zip(&tail[(k - i - 1) * m..(k - i) * m]) {
                    *a -= c * b;
                }
            }
            let d = l[i * n + i];
            xi.iter_mut().for_each(|v| *v /= d);
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Dense matrix product `a (r x k) * b (k x c)`, used by tests and assembly.
pub fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            for j in 0..c {
                out[i * c + j] += av * b[t * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_spd() {
        let a = vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let ch = Cholesky::factor(3, a.clone()).unwrap();
        let x = ch.solve(&[1.0, 2.0, 3.0]);
        let back = matmul(&a, &x, 3, 3, 1);
        for (b, e) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((b - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        assert!(Cholesky::factor(2, vec![1.0, 2.0, 2.0, 1.0]).is_err());
    }
}
