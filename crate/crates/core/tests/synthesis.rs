use dff_core::fusion;
use dff_core::grid::{Grid, Image};
use dff_core::rng;
use dff_core::scenes::{self, SceneConfig};
use dff_core::synth::{self, CameraParams};
use dff_core::volume::{self, SharpnessKind};
use dff_core::DepthMap;

fn quiet() -> SceneConfig {
    SceneConfig {
        noise: 0.0,
        ..SceneConfig::default()
    }
}

/// Mean absolute four-neighbour Laplacian away from the border.
fn mean_abs_laplacian(img: &Image, margin: usize) -> f64 {
    let g = volume::laplacian(&img.to_gray()).crop(margin).unwrap();
    g.data().iter().map(|v| v.abs()).sum::<f64>() / g.data().len() as f64
}

fn radius(cam: &CameraParams, focus: f64, depth: f64) -> usize {
    cam.radius_px(synth::coc_diameter(focus, depth, cam).unwrap())
}

#[test]
fn in_focus_plane_is_bitwise_identical() {
    let cfg = quiet();
    let scene = scenes::constant_depth(&cfg, 1.5, 3).unwrap();
    assert_eq!(scene.stack.planes()[2].data(), scene.image.data());
    assert_ne!(scene.stack.planes()[0].data(), scene.image.data());
}

#[test]
fn two_layer_blurs_only_the_defocused_layer() {
    let cfg = SceneConfig {
        focal_distances: vec![0.8, 2.2],
        ..quiet()
    };
    let scene = scenes::two_layer(&cfg, 0.8, 2.2, 1).unwrap();
    let plane = &scene.stack.planes()[0];
    let (mut near_dev, mut far_dev, mut far_n) = (0.0f64, 0.0, 0.0);
    for (&d, (a, b)) in scene
        .depth
        .values()
        .iter()
        .zip(plane.data().iter().zip(scene.image.data()))
    {
        if d == 0.8 {
            near_dev = near_dev.max((a - b).abs());
        } else {
            far_dev += (a - b).abs();
            far_n += 1.0;
        }
    }
    assert_eq!(near_dev, 0.0);
    assert!(far_dev / far_n > 0.0);
}

#[test]
fn blur_preserves_global_mean_on_interior_crop() {
    let cfg = SceneConfig {
        width: 256,
        height: 256,
        ..quiet()
    };
    for seed in 0..2 {
        let scene = scenes::constant_depth(&cfg, 1.2, seed).unwrap();
        let m = cfg.camera.max_coc_px;
        let reference = scene.image.to_gray().crop(m).unwrap().mean();
        for plane in scene.stack.planes() {
            let mean = plane.to_gray().crop(m).unwrap().mean();
            assert!((mean - reference).abs() < 1e-3, "{mean} vs {reference}");
        }
    }
}

#[test]
fn sharpness_is_monotone_when_planes_lie_on_one_side() {
    // CoC grows monotonically with the focus distance on either side of the
    // object, so one-sided plane sets give the textbook ordering.
    let cfg = quiet();
    for seed in 0..10 {
        for depth in [0.5, 0.4, 2.5, 3.0] {
            let scene = scenes::constant_depth(&cfg, depth, seed).unwrap();
            let s: Vec<f64> = scene.stack.planes().iter().map(|p| mean_abs_laplacian(p, 6)).collect();
            let mut order: Vec<usize> = (0..s.len()).collect();
            let f = &cfg.focal_distances;
            order.sort_by(|&a, &b| (f[a] - depth).abs().partial_cmp(&(f[b] - depth).abs()).unwrap());
            for pair in order.windows(2) {
                assert!(s[pair[0]] >= s[pair[1]], "seed {seed} depth {depth}: {s:?}");
            }
        }
    }
}

#[test]
fn sharpness_is_monotone_on_each_side_of_the_depth() {
    let cfg = quiet();
    let f = &cfg.focal_distances;
    for seed in 0..10 {
        for depth in [1.0, 1.2, 1.5, 1.8, 2.0] {
            let scene = scenes::constant_depth(&cfg, depth, seed).unwrap();
            let s: Vec<f64> = scene.stack.planes().iter().map(|p| mean_abs_laplacian(p, 6)).collect();
            let below: Vec<usize> = (0..f.len()).filter(|&n| f[n] <= depth).collect();
            let above: Vec<usize> = (0..f.len()).filter(|&n| f[n] >= depth).collect();
            for pair in below.windows(2) {
                assert!(s[pair[1]] >= s[pair[0]], "seed {seed} depth {depth}: {s:?}");
            }
            for pair in above.windows(2) {
                assert!(s[pair[0]] >= s[pair[1]], "seed {seed} depth {depth}: {s:?}");
            }
            // the sharpest plane is the one with the smallest blur radius
            let radii: Vec<usize> = f.iter().map(|&x| radius(&cfg.camera, x, depth)).collect();
            let best = (0..f.len()).max_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap()).unwrap();
            assert_eq!(radii[best], *radii.iter().min().unwrap());
        }
    }
}

/// Pixels at least `reach` away from any depth edge.
fn interior(depth: &DepthMap, reach: usize) -> Vec<(usize, usize)> {
    let (w, h) = depth.dims();
    let mut out = Vec::new();
    for y in reach..h - reach {
        for x in reach..w - reach {
            let d = depth.get(x, y);
            if (y - reach..=y + reach).all(|yy| (x - reach..=x + reach).all(|xx| depth.get(xx, yy) == d)) {
                out.push((x, y));
            }
        }
    }
    out
}

fn max_radius(cam: &CameraParams, f: &[f64], depths: &[f64]) -> usize {
    depths
        .iter()
        .flat_map(|&d| f.iter().map(move |&p| radius(cam, p, d)))
        .max()
        .unwrap()
}

fn big() -> SceneConfig {
    SceneConfig {
        width: 128,
        height: 128,
        ..quiet()
    }
}

#[test]
fn baseline_picks_least_blurred_plane_inside_layers() {
    // Planes with equal radii are identical inside a layer, so the baseline
    // resolves ties to the lowest index.
    let cfg = big();
    let f = &cfg.focal_distances;
    for seed in 0..5 {
        let (near, far) = scenes::random_layer_depths(&cfg, seed);
        let scene = scenes::two_layer(&cfg, near, far, seed).unwrap();
        let s = volume::sharpness_measure(&scene.stack, SharpnessKind::LaplacianSq, 5).unwrap();
        let base = fusion::argmax_baseline(&s, f).unwrap();
        let pts = interior(&scene.depth, max_radius(&cfg.camera, f, &[near, far]) + 3);
        assert!(!pts.is_empty());
        for (x, y) in pts {
            let d = scene.depth.get(x, y);
            let radii: Vec<usize> = f.iter().map(|&p| radius(&cfg.camera, p, d)).collect();
            let min_r = *radii.iter().min().unwrap();
            let expected = f[radii.iter().position(|&r| r == min_r).unwrap()];
            assert_eq!(base.get(x, y), expected, "seed {seed} depth {d}");
        }
    }
}

#[test]
fn baseline_equals_nearest_plane_when_it_is_least_blurred() {
    let cfg = big();
    let f = &cfg.focal_distances;
    for (near, far) in [(0.6, 1.3), (0.9, 1.6), (1.1, 1.9)] {
        for d in [near, far] {
            let radii: Vec<usize> = f.iter().map(|&p| radius(&cfg.camera, p, d)).collect();
            let nearest = (0..f.len())
                .min_by(|&a, &b| (f[a] - d).abs().partial_cmp(&(f[b] - d).abs()).unwrap())
                .unwrap();
            assert!(
                (0..f.len()).all(|n| n == nearest || radii[n] > radii[nearest]),
                "{d}: {radii:?}"
            );
        }
        for seed in 0..3 {
            let scene = scenes::two_layer(&cfg, near, far, seed).unwrap();
            let s = volume::sharpness_measure(&scene.stack, SharpnessKind::LaplacianSq, 5).unwrap();
            let base = fusion::argmax_baseline(&s, f).unwrap();
            let pts = interior(&scene.depth, max_radius(&cfg.camera, f, &[near, far]) + 3);
            assert!(!pts.is_empty());
            for (x, y) in pts {
                let d = scene.depth.get(x, y);
                let nearest = f
                    .iter()
                    .copied()
                    .min_by(|a, b| (a - d).abs().partial_cmp(&(b - d).abs()).unwrap())
                    .unwrap();
                assert_eq!(base.get(x, y), nearest);
            }
        }
    }
}

#[test]
fn layer_count_and_dimensions_are_validated() {
    let img = Image::from_gray(Grid::filled(8, 8, 0.5));
    let cam = CameraParams::new(0.025, 2.0, 2e-5);
    let d = DepthMap::constant(8, 8, 1.0);
    assert!(synth::synthesize_stack(&img, &d, &[0.5, 1.0], &cam, 1).is_err());
    assert!(synth::synthesize_stack(&img, &DepthMap::constant(7, 8, 1.0), &[0.5, 1.0], &cam, 4).is_err());
    assert!(synth::synthesize_stack(&img, &d, &[1.0, 0.5], &cam, 4).is_err());
    let bad = CameraParams::new(-1.0, 2.0, 2e-5);
    assert!(synth::synthesize_stack(&img, &d, &[0.5, 1.0], &bad, 4).is_err());
    let stack = synth::synthesize_stack(&img, &d, &[0.5, 1.0], &cam, 4).unwrap();
    assert_eq!(stack.len(), 2);
}

#[test]
fn noise_is_seeded() {
    let cfg = SceneConfig::default();
    let a = scenes::two_layer(&cfg, 0.8, 2.0, 9).unwrap();
    let b = scenes::two_layer(&cfg, 0.8, 2.0, 9).unwrap();
    assert_eq!(a.stack.planes()[1].data(), b.stack.planes()[1].data());
    let r = rng::stream_seed(9, "x");
    assert_ne!(r, rng::stream_seed(9, "y"));
}
