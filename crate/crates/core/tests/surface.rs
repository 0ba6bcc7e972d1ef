use dff_core::rng;
use dff_core::surface::{
    grad_of_surface, integrability_project, integrability_project_with, Backend, DiffOperator, GradientField,
    Projector, SurfaceField,
};
use proptest::prelude::*;
use rand::Rng;

fn random_surface(r: &mut impl Rng, w: usize, h: usize) -> SurfaceField {
    SurfaceField::from_data(w, h, 1, 1, (0..w * h).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Smallest nonzero eigenvalue of the Neumann grid Laplacian `PᵀP`.
fn min_nonzero_eigenvalue(w: usize, h: usize) -> f64 {
    let n = w.max(h) as f64;
    2.0 - 2.0 * (std::f64::consts::PI / n).cos()
}

#[test]
fn recovers_surfaces_without_regularization() {
    let mut r = rng::stream(1, "surface.recover");
    for _ in 0..100 {
        let w = r.random_range(4..=16);
        let h = r.random_range(4..=16);
        let z0 = random_surface(&mut r, w, h);
        let gamma = grad_of_surface(&z0).unwrap();
        let z = integrability_project(&gamma, 0.0).unwrap();
        assert!(max_abs_diff(z.data(), z0.data()) < 1e-9);
    }
}

#[test]
fn regularized_recovery_error_is_bounded_by_lambda() {
    // z_λ − z₀ = −λ (PᵀP + λ)⁻¹ z₀ on the zero-mean subspace, so the error is at
    // most λ ‖z₀‖₂ / μ_min.
    let lambda = 1e-6;
    let mut r = rng::stream(2, "surface.recover_reg");
    for _ in 0..50 {
        let w = r.random_range(4..=16);
        let h = r.random_range(4..=16);
        let z0 = random_surface(&mut r, w, h);
        let z = integrability_project(&grad_of_surface(&z0).unwrap(), lambda).unwrap();
        let norm = z0.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let bound = lambda * norm / min_nonzero_eigenvalue(w, h) + 1e-12;
        assert!(max_abs_diff(z.data(), z0.data()) <= bound);
    }
}

#[test]
fn projection_is_idempotent_on_curl_heavy_fields() {
    let (w, h) = (9, 7);
    let hw = w * h;
    let mut data = vec![0.0; 2 * hw];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = 1.0;
            data[hw + y * w + x] = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
        }
    }
    let gamma = GradientField::from_data(w, h, 1, 1, data).unwrap();
    let z1 = integrability_project(&gamma, 0.0).unwrap();
    let z2 = integrability_project(&grad_of_surface(&z1).unwrap(), 0.0).unwrap();
    assert!(max_abs_diff(z1.data(), z2.data()) < 1e-10);

    // with λ > 0 the second pass shrinks by at most λ ‖z₁‖₂ / μ_min
    let lambda = 1e-6;
    let z1 = integrability_project(&gamma, lambda).unwrap();
    let z2 = integrability_project(&grad_of_surface(&z1).unwrap(), lambda).unwrap();
    let norm = z1.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let bound = lambda * norm / min_nonzero_eigenvalue(w, h);
    assert!(max_abs_diff(z1.data(), z2.data()) <= bound);
}

#[test]
fn backends_agree() {
    let mut r = rng::stream(3, "surface.backends");
    for (w, h) in [(2, 2), (5, 3), (14, 14), (16, 16), (16, 9)] {
        let gamma =
            GradientField::from_data(w, h, 2, 2, (0..8 * w * h).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let dense = integrability_project_with(&gamma, 1e-6, Backend::Dense).unwrap();
        let cg = integrability_project_with(&gamma, 1e-6, Backend::ConjugateGradient).unwrap();
        assert!(max_abs_diff(dense.data(), cg.data()) < 1e-7, "{w}x{h}");
    }
}

#[test]
fn large_grids_use_conjugate_gradients() {
    let p = Projector::new(40, 40, 1e-6, Backend::Auto).unwrap();
    assert!(!p.is_dense());
    assert!(Projector::new(32, 32, 1e-6, Backend::Auto).unwrap().is_dense());
    let mut r = rng::stream(4, "surface.cg");
    let gamma: Vec<f64> = (0..2 * 1600).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut z = vec![0.0; 1600];
    p.project_channel(&gamma, &mut z).unwrap();
    // optimality up to the removed mean
    let res = p.normal_residual(&gamma, &z);
    let scale = gamma.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mean = res.iter().sum::<f64>() / res.len() as f64;
    let norm = res.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
    assert!(norm / scale < 1e-8, "{}", norm / scale);
}

#[test]
fn normal_equations_hold_for_dense_solves() {
    let mut r = rng::stream(5, "surface.normal");
    let p = Projector::new(10, 6, 0.0, Backend::Dense).unwrap();
    let gamma: Vec<f64> = (0..120).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut z = vec![0.0; 60];
    p.project_channel(&gamma, &mut z).unwrap();
    let res = p.normal_residual(&gamma, &z);
    assert!(res.iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn adjoint_matches_dense_transpose() {
    let op = DiffOperator::new(4, 3).unwrap();
    let dense = op.to_dense();
    let (rows, cols) = (op.rows(), op.cols());
    assert_eq!((rows, cols), (24, 12));
    assert!(dense.iter().all(|&v| v == 0.0 || v == 1.0 || v == -1.0));
    let g: Vec<f64> = (0..rows).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut out = vec![0.0; cols];
    op.apply_transpose(&g, &mut out);
    for j in 0..cols {
        let expected: f64 = (0..rows).map(|i| dense[i * cols + j] * g[i]).sum();
        assert!((out[j] - expected).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_never_beaten_by_candidates(seed in any::<u64>(), w in 2usize..7, h in 2usize..7) {
        let mut r = rng::stream(seed, "surface.argmin");
        let gamma: Vec<f64> = (0..2 * w * h).map(|_| r.random_range(-1.0..1.0)).collect();
        let p = Projector::new(w, h, 0.0, Backend::Dense).unwrap();
        let op = p.operator();
        let mut z = vec![0.0; w * h];
        p.project_channel(&gamma, &mut z).unwrap();
        let resid = |z: &[f64]| {
            let mut pz = vec![0.0; 2 * w * h];
            op.apply(z, &mut pz);
            pz.iter().zip(&gamma).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let best = resid(&z);
        for _ in 0..100 {
            let cand: Vec<f64> = z.iter().map(|v| v + r.random_range(-0.5..0.5)).collect();
            prop_assert!(best <= resid(&cand) + 1e-12);
        }
    }

    #[test]
    fn gauge_invariance(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut r = rng::stream(seed, "surface.gauge");
        let z0 = random_surface(&mut r, 6, 5);
        let shifted: Vec<f64> = z0.data().iter().map(|v| v + shift).collect();
        let g0 = grad_of_surface(&z0).unwrap();
        let z1 = SurfaceField::from_data(6, 5, 1, 1, shifted.clone()).unwrap();
        let g1 = grad_of_surface(&z1).unwrap();
        let a = integrability_project(&g0, 1e-6).unwrap();
        let b = integrability_project(&g1, 1e-6).unwrap();
        prop_assert!(max_abs_diff(a.data(), b.data()) < 1e-12);
        // the gradient of a shifted raw surface equals the unshifted one
        let op = DiffOperator::new(6, 5).unwrap();
        let (mut p0, mut p1) = (vec![0.0; 60], vec![0.0; 60]);
        op.apply(z0.data(), &mut p0);
        op.apply(&shifted, &mut p1);
        prop_assert!(max_abs_diff(&p0, &p1) < 1e-12);
    }

    #[test]
    fn gradient_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng::stream(seed, "surface.linear");
        let x = random_surface(&mut r, 4, 4);
        let y = random_surface(&mut r, 4, 4);
        let comb: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let gc = grad_of_surface(&SurfaceField::from_data(4, 4, 1, 1, comb).unwrap()).unwrap();
        let gx = grad_of_surface(&x).unwrap();
        let gy = grad_of_surface(&y).unwrap();
        for i in 0..gc.data().len() {
            prop_assert!((gc.data()[i] - (a * gx.data()[i] + b * gy.data()[i])).abs() < 1e-12);
        }
    }
}
