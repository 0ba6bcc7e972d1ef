//! Brute-force reimplementations checked against the library.

use dff_core::fusion::{self, FocusLogits};
use dff_core::grid::{Grid, Image};
use dff_core::losses::{self, GradFusionMap, GradientTarget};
use dff_core::metrics::{self, MetricsReport};
use dff_core::rng;
use dff_core::surface::SurfaceField;
use dff_core::synth;
use dff_core::volume;
use dff_core::{DepthMap, FocusProbabilityMap};
use rand::Rng;

fn random_map(r: &mut impl Rng, w: usize, h: usize, invalid_every: usize) -> DepthMap {
    let v = (0..w * h)
        .map(|i| {
            if invalid_every > 0 && i % invalid_every == 3 {
                0.0
            } else {
                r.random_range(0.3..4.0)
            }
        })
        .collect();
    DepthMap::new(w, h, v).unwrap()
}

fn metrics_loop(pred: &DepthMap, gt: &DepthMap) -> MetricsReport {
    let (w, h) = gt.dims();
    let (mut n, mut se, mut ar, mut sr, mut ls) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut d = [0.0; 3];
    for y in 0..h {
        for x in 0..w {
            if !gt.is_valid(x, y) {
                continue;
            }
            let (p, g) = (pred.get(x, y).max(1e-6), gt.get(x, y));
            n += 1.0;
            se += (pred.get(x, y) - g).powi(2);
            ar += (p - g).abs() / g;
            sr += (p - g).powi(2) / g;
            ls += (p.ln() - g.ln()).powi(2);
            let ratio = f64::max(p / g, g / p);
            for (k, dk) in d.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(k as i32 + 1) {
                    *dk += 1.0;
                }
            }
        }
    }
    let (mut bs, mut bn) = (0.0, 0.0);
    let ok = |x: usize, y: usize| gt.is_valid(x, y) && pred.is_valid(x, y);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if ok(x, y) && ok(x - 1, y) && ok(x + 1, y) && ok(x, y - 1) && ok(x, y + 1) {
                let l = pred.get(x - 1, y) + pred.get(x + 1, y) + pred.get(x, y - 1) + pred.get(x, y + 1)
                    - 4.0 * pred.get(x, y);
                bs += l * l;
                bn += 1.0;
            }
        }
    }
    MetricsReport {
        mse: se / n,
        rmse: (se / n).sqrt(),
        log_rmse: (ls / n).sqrt(),
        absrel: ar / n,
        sqrel: sr / n,
        delta1: d[0] / n,
        delta2: d[1] / n,
        delta3: d[2] / n,
        bump: if bn > 0.0 { 100.0 * bs / bn } else { 0.0 },
        valid_pixels: n as usize,
        clamped_pixels: 0,
        invalid_trend_pct: None,
    }
}

#[test]
fn metrics_match_scalar_loops() {
    let mut r = rng::stream(11, "oracle.metrics");
    for _ in 0..50 {
        let gt = random_map(&mut r, 16, 16, 7);
        let pred = random_map(&mut r, 16, 16, 0);
        let a = metrics::evaluate(&pred, &gt).unwrap();
        let b = metrics_loop(&pred, &gt);
        for (x, y) in [
            (a.mse, b.mse),
            (a.rmse, b.rmse),
            (a.log_rmse, b.log_rmse),
            (a.absrel, b.absrel),
            (a.sqrel, b.sqrel),
            (a.delta1, b.delta1),
            (a.delta2, b.delta2),
            (a.delta3, b.delta3),
            (a.bump, b.bump),
        ] {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
        }
        assert_eq!(a.valid_pixels, b.valid_pixels);
        assert!(a.delta1 <= a.delta2 && a.delta2 <= a.delta3);
    }
}

#[test]
fn trend_matches_per_pixel_loop() {
    let mut r = rng::stream(5, "oracle.trend");
    for _ in 0..20 {
        let (w, h, n) = (8, 8, 5);
        // coarse values make ties and exact plateaus common
        let logits: Vec<f64> = (0..w * h * n).map(|_| r.random_range(0..4) as f64 * 0.5).collect();
        let p = fusion::to_probabilities(&FocusLogits::new(w, h, n, logits).unwrap());
        let mut bad = 0;
        for px in p.iter_pixels() {
            let mut k = 0;
            for i in 1..n {
                if px[i] > px[k] {
                    k = i;
                }
            }
            let mut invalid = false;
            for i in 0..n - 1 {
                let step = px[i + 1] - px[i];
                if (i < k && step < -1e-9) || (i >= k && step > 1e-9) {
                    invalid = true;
                }
            }
            bad += invalid as usize;
        }
        let expected = 100.0 * bad as f64 / (w * h) as f64;
        assert_eq!(metrics::invalid_focus_trend(&p, 1e-9), expected);
    }
}

#[test]
fn focus_volume_matches_loop() {
    let mut r = rng::stream(3, "oracle.volume");
    let (w, h, c, n) = (4, 4, 1, 3);
    let feats: Vec<Image> = (0..n)
        .map(|_| Image::new(w, h, c, (0..w * h * c).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let v = volume::build_focus_volume(&feats).unwrap();
    assert_eq!(v.channels(), 2 * c);
    for k in 0..n {
        let next = if k + 1 < n { k + 1 } else { n - 1 };
        let prev = if k + 1 < n { k } else { n - 2 };
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    assert_eq!(v.get(k, x, y, ch), feats[k].get(x, y, ch));
                    let d = feats[next].get(x, y, ch) - feats[prev].get(x, y, ch);
                    assert_eq!(v.get(k, x, y, c + ch), d);
                }
            }
        }
    }
}

#[test]
fn disc_blur_matches_dense_convolution() {
    let mut r = rng::stream(8, "oracle.disc");
    let src = Grid::from_fn(8, 8, |_, _| r.random_range(0.0..1.0));
    for radius in 0..4 {
        let k = synth::disc_kernel(radius);
        let fast = synth::disc_blur(&src, radius);
        let rr = radius as isize;
        for y in 0..8 {
            for x in 0..8 {
                let mut acc = 0.0;
                for ky in -rr..=rr {
                    for kx in -rr..=rr {
                        let wgt = k.get((kx + rr) as usize, (ky + rr) as usize);
                        acc += wgt * src.get_clamped(x as isize + kx, y as isize + ky);
                    }
                }
                assert!((fast.get(x, y) - acc).abs() < 1e-12, "r={radius} ({x},{y})");
            }
        }
    }
}

#[test]
fn disc_blur_preserves_mean_of_periodic_texture() {
    // a texture that is periodic with the crop keeps its mean away from the border
    let period = 4;
    let src = Grid::from_fn(40, 40, |x, y| {
        ((x % period) as f64 * 0.2 + (y % period) as f64 * 0.05).min(1.0)
    });
    for radius in 1..5 {
        let out = synth::disc_blur(&src, radius);
        let m = 8;
        let inner = |g: &Grid| g.crop(m).unwrap().mean();
        assert!((inner(&out) - inner(&src)).abs() < 1e-3, "radius {radius}");
    }
}

#[test]
fn kernels_sum_to_one() {
    for radius in 0..=31 {
        let s: f64 = synth::disc_kernel(radius).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn spatial_loss_three_by_three_by_hand() {
    // one plane, one channel, identity centre tap on both outputs
    let gt = DepthMap::new(3, 3, vec![1.0, 1.5, 1.2, 1.1, 1.3, 2.0, 1.0, 1.0, 1.6]).unwrap();
    let target = GradientTarget::from_depth(&gt, 3, 3).unwrap();
    let f = [1.0, 2.0];
    let q = losses::sharpness_weights(target.depth(), &f).unwrap();
    let zv = vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.0, -0.4];
    let mean = zv.iter().sum::<f64>() / 9.0;
    let z = SurfaceField::from_data(3, 3, 1, 2, zv.iter().chain(&zv).copied().collect()).unwrap();
    let mut theta = GradFusionMap::zeros(1);
    theta.set_weight(1, 1, 0, 0, 1.0);
    theta.set_weight(1, 1, 0, 1, 1.0);
    let loss = losses::spatial_variational_loss(&z, &theta, &target, &q).unwrap();

    let mut expected = 0.0;
    for n in 0..2 {
        for y in 0..3 {
            for x in 0..3 {
                let i = y * 3 + x;
                let d = gt.values();
                let zc = zv[i] - mean;
                let weight = q.pixel(i)[n];
                if x < 2 {
                    expected += weight * (zc - (d[i + 1] - d[i])).abs();
                } else {
                    expected += weight * zc.abs();
                }
                if y < 2 {
                    expected += weight * (zc - (d[i + 3] - d[i])).abs();
                } else {
                    expected += weight * zc.abs();
                }
            }
        }
    }
    assert!((loss.value - expected).abs() < 1e-12, "{} vs {expected}", loss.value);
}

#[test]
fn spatial_loss_vanishes_on_matching_gradients() {
    let gt = DepthMap::new(6, 5, (0..30).map(|i| 1.0 + 0.1 * (i % 7) as f64).collect()).unwrap();
    let target = GradientTarget::from_depth(&gt, 6, 5).unwrap();
    let q = losses::sharpness_weights(target.depth(), &[0.5, 1.5]).unwrap();
    let c = 4;
    let d = target.depth().values().to_vec();
    let data: Vec<f64> = (0..2 * c).flat_map(|_| d.iter().copied()).collect();
    let z = SurfaceField::from_data(6, 5, c, 2, data).unwrap();
    let theta = GradFusionMap::channel_mean_difference(c);
    let loss = losses::spatial_variational_loss(&z, &theta, &target, &q).unwrap();
    assert!(loss.value < 1e-12, "{}", loss.value);

    let flat = GradientTarget::from_depth(&DepthMap::constant(6, 5, 2.0), 6, 5).unwrap();
    let qf = losses::sharpness_weights(flat.depth(), &[0.5, 1.5]).unwrap();
    let zero = SurfaceField::zeros(6, 5, c, 2);
    let loss = losses::spatial_variational_loss(&zero, &GradFusionMap::zeros(c), &flat, &qf).unwrap();
    assert_eq!(loss.value, 0.0);
}

#[test]
fn fusion_is_weighted_sum_of_planes() {
    let mut r = rng::stream(2, "oracle.fusion");
    let (w, h, n) = (5, 4, 4);
    let f = [0.7, 1.1, 1.9, 3.0];
    let logits = FocusLogits::new(w, h, n, (0..w * h * n).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
    let p = fusion::to_probabilities(&logits);
    let d = fusion::depth_from_probabilities(&p, &f).unwrap();
    for i in 0..w * h {
        let px = p.pixel(i);
        assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let expected: f64 = px.iter().zip(&f).map(|(a, b)| a * b).sum();
        assert!((d.values()[i] - expected).abs() < 1e-12);
        assert!(d.values()[i] >= f[0] && d.values()[i] <= f[3]);
    }
}

#[test]
fn q_argmax_is_nearest_plane() {
    let mut r = rng::stream(4, "oracle.q");
    let f = [0.5, 0.9, 1.6, 2.2, 3.1];
    let gt = random_map(&mut r, 9, 9, 0);
    let q = losses::sharpness_weights(&gt, &f).unwrap();
    for (i, &d) in gt.values().iter().enumerate() {
        let px = q.pixel(i);
        assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(px.iter().all(|&v| v > 0.0 && v < 1.0));
        let nearest = (0..f.len())
            .min_by(|&a, &b| (f[a] - d).abs().partial_cmp(&(f[b] - d).abs()).unwrap())
            .unwrap();
        let arg = (0..f.len())
            .max_by(|&a, &b| px[a].partial_cmp(&px[b]).unwrap())
            .unwrap();
        assert_eq!(arg, nearest);
    }
}

#[test]
fn probability_map_rejects_bad_rows() {
    assert!(FocusProbabilityMap::new(1, 1, 3, vec![0.5, 0.5, 0.5]).is_err());
    assert!(FocusProbabilityMap::new(1, 1, 2, vec![1.2, -0.2]).is_err());
    assert!(FocusProbabilityMap::new(1, 1, 2, vec![0.25, 0.75]).is_ok());
}
