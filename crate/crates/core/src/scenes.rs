//! Seeded synthetic scenes with known depth for experiments and tests.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::grid::{Grid, Image};
use crate::rng;
use crate::synth::{synthesize_stack, CameraParams, DEFAULT_LAYERS};
use crate::types::{DepthMap, FocalStack};

/// Rendering setup shared by the generators.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub focal_distances: Vec<f64>,
    pub camera: CameraParams,
    pub layers: usize,
    /// Half-width of the uniform sensor noise added after rendering.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 48,
            height: 48,
            focal_distances: vec![0.5, 1.0, 1.5, 2.0, 2.5],
            camera: CameraParams::new(0.025, 2.0, 2e-5),
            layers: DEFAULT_LAYERS,
            noise: 0.01,
        }
    }
}

impl SceneConfig {
    pub fn plane_spacing(&self) -> f64 {
        let f = &self.focal_distances;
        (f[f.len() - 1] - f[0]) / (f.len() - 1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: Image,
    pub depth: DepthMap,
    pub stack: FocalStack,
    /// Pixels carrying texture (the rest is flat).
    pub textured: Vec<bool>,
}

/// Uniform white-noise texture in `[0.15, 0.85]`.
pub fn noise_texture(width: usize, height: usize, rng: &mut impl Rng) -> Grid {
    Grid::from_fn(width, height, |_, _| 0.5 + 0.35 * rng.random_range(-1.0..=1.0))
}

fn add_noise(stack: FocalStack, amplitude: f64, rng: &mut impl Rng) -> Result<FocalStack> {
    if amplitude <= 0.0 {
        return Ok(stack);
    }
    let f = stack.focal_distances().to_vec();
    let planes = stack
        .planes()
        .iter()
        .map(|p| {
            let data = p
                .data()
                .iter()
                .map(|&v| (v + amplitude * rng.random_range(-1.0..=1.0)).clamp(0.0, 1.0))
                .collect();
            Image::new(p.width(), p.height(), p.channels(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    FocalStack::new(planes, f)
}

fn render(cfg: &SceneConfig, image: Image, depth: DepthMap, textured: Vec<bool>, seed: u64) -> Result<SyntheticScene> {
    let stack = synthesize_stack(&image, &depth, &cfg.focal_distances, &cfg.camera, cfg.layers)?;
    let stack = add_noise(stack, cfg.noise, &mut rng::stream(seed, "scene.noise"))?;
    Ok(SyntheticScene {
        image,
        depth,
        stack,
        textured,
    })
}

/// Fully textured fronto-parallel plane at `depth`.
pub fn constant_depth(cfg: &SceneConfig, depth: f64, seed: u64) -> Result<SyntheticScene> {
    let tex = noise_texture(cfg.width, cfg.height, &mut rng::stream(seed, "scene.texture"));
    let d = DepthMap::constant(cfg.width, cfg.height, depth);
    render(cfg, Image::from_gray(tex), d, vec![true; cfg.width * cfg.height], seed)
}

fn disc_mask(cfg: &SceneConfig) -> Vec<bool> {
    let (cx, cy) = (cfg.width as f64 / 2.0, cfg.height as f64 / 2.0);
    let r = cfg.width.min(cfg.height) as f64 / 4.0;
    (0..cfg.height)
        .flat_map(|y| (0..cfg.width).map(move |x| (x, y)))
        .map(|(x, y)| {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            dx * dx + dy * dy <= r * r
        })
        .collect()
}

/// A near disc in front of a far background, textured everywhere.
pub fn two_layer(cfg: &SceneConfig, near: f64, far: f64, seed: u64) -> Result<SyntheticScene> {
    let tex = noise_texture(cfg.width, cfg.height, &mut rng::stream(seed, "scene.texture"));
    let values = disc_mask(cfg).iter().map(|&m| if m { near } else { far }).collect();
    let d = DepthMap::new(cfg.width, cfg.height, values)?;
    render(cfg, Image::from_gray(tex), d, vec![true; cfg.width * cfg.height], seed)
}

/// Two-layer geometry where only the left half carries texture; the right
/// half is a flat gray wall.
pub fn textured_and_flat(cfg: &SceneConfig, near: f64, far: f64, seed: u64) -> Result<SyntheticScene> {
    let tex = noise_texture(cfg.width, cfg.height, &mut rng::stream(seed, "scene.texture"));
    let half = cfg.width / 2;
    let textured: Vec<bool> = (0..cfg.width * cfg.height).map(|i| i % cfg.width < half).collect();
    let img = Grid::from_fn(cfg.width, cfg.height, |x, y| if x < half { tex.get(x, y) } else { 0.5 });
    let values = disc_mask(cfg).iter().map(|&m| if m { near } else { far }).collect();
    let d = DepthMap::new(cfg.width, cfg.height, values)?;
    render(cfg, Image::from_gray(img), d, textured, seed)
}

/// Two depths drawn strictly between the outer planes and away from the
/// planes themselves, so nearest-plane quantization always errs.
pub fn random_layer_depths(cfg: &SceneConfig, seed: u64) -> (f64, f64) {
    let f = &cfg.focal_distances;
    let spacing = cfg.plane_spacing();
    let mut r = rng::stream(seed, "scene.depths");
    let draw = |r: &mut rng::StreamRng| {
        let slot = r.random_range(0..f.len() - 1);
        f[slot] + spacing * r.random_range(0.2..0.8)
    };
    let a = draw(&mut r);
    let mut b = draw(&mut r);
    while (a - b).abs() < 0.5 * spacing {
        b = draw(&mut r);
    }
    (a.min(b), a.max(b))
}
