//! Flag groups shared by the subcommands. Every flag is also a key of the
//! JSON config file; explicit flags win over the file, the file wins over
//! built-in defaults.

use std::path::Path;

use anyhow::{bail, Context};
use clap::Args;
use dff_core::scenes::SceneConfig;
use dff_core::solver::{SolverConfig, Variant};
use dff_core::synth::CameraParams;
use dff_core::volume::SharpnessKind;
use serde::{Deserialize, Serialize};

/// Solver settings. Unset fields fall back to [`SolverConfig::default`].
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverFlags {
    /// Gradient descent iterations
    #[arg(long)]
    pub steps: Option<usize>,
    /// Base learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the spatial variational term
    #[arg(long)]
    pub lambda_sv: Option<f64>,
    /// Weight of the focal variational term
    #[arg(long)]
    pub lambda_fv: Option<f64>,
    /// Tikhonov weight of the integrability projection
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    /// Smooth-L1 transition of the depth loss
    #[arg(long)]
    pub beta: Option<f64>,
    /// Surface working resolution, `N` or `WxH`
    #[arg(long)]
    pub surf_res: Option<String>,
    /// Channels of the predicted gradient field
    #[arg(long)]
    pub c2: Option<usize>,
    /// Weight of the sharpness cross-entropy data term
    #[arg(long)]
    pub data_weight: Option<f64>,
    /// Focus measure: laplacian_sq or tenengrad
    #[arg(long)]
    pub sharpness: Option<String>,
    /// Box window of the focus measure (odd)
    #[arg(long)]
    pub window: Option<usize>,
    /// Seed for every random stream
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trace record interval in steps
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Objective variant: full, no_sv, no_fv, no_integrability, no_q, inverse_q
    #[arg(long)]
    pub variant: Option<String>,
}

/// Camera and rendering settings for `synth`.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthFlags {
    /// Focus distances in meters, comma separated and increasing
    #[arg(long)]
    pub focus: Option<String>,
    /// Focal length in meters
    #[arg(long)]
    pub f: Option<f64>,
    /// Aperture f-number
    #[arg(long)]
    pub fnum: Option<f64>,
    /// Sensor pixel pitch in meters
    #[arg(long)]
    pub pitch: Option<f64>,
    /// Blur radius clamp in pixels
    #[arg(long)]
    pub max_coc: Option<usize>,
    /// Depth layers used for compositing
    #[arg(long)]
    pub layers: Option<usize>,
    /// Border in pixels removed from the inputs before rendering
    #[arg(long)]
    pub crop: Option<usize>,
    /// Half-width of uniform sensor noise for built-in scenes
    #[arg(long)]
    pub noise: Option<f64>,
}

macro_rules! overlay {
    ($flags:expr, $file:expr; $($field:ident),*) => {{
        let (a, b) = ($flags, $file);
        Self { $($field: a.$field.or(b.$field)),* }
    }};
}

impl SolverFlags {
    /// `self` with unset fields taken from `file`.
    pub fn overlay(self, file: Self) -> Self {
        overlay!(self, file; steps, lr, lambda_sv, lambda_fv, lambda_reg, beta, surf_res, c2,
            data_weight, sharpness, window, seed, log_every, variant)
    }

    pub fn to_config(&self) -> anyhow::Result<SolverConfig> {
        let d = SolverConfig::default();
        let surface_size = match &self.surf_res {
            Some(s) => parse_resolution(s)?,
            None => d.surface_size,
        };
        let sharpness = match self.sharpness.as_deref() {
            None => d.sharpness,
            Some("laplacian_sq") => SharpnessKind::LaplacianSq,
            Some("tenengrad") => SharpnessKind::Tenengrad,
            Some(other) => bail!("unknown sharpness measure {other:?} (expected laplacian_sq or tenengrad)"),
        };
        let variant = match &self.variant {
            Some(v) => v.parse::<Variant>()?,
            None => d.variant,
        };
        let cfg = SolverConfig {
            steps: self.steps.unwrap_or(d.steps),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            lambda_sv: self.lambda_sv.unwrap_or(d.lambda_sv),
            lambda_fv: self.lambda_fv.unwrap_or(d.lambda_fv),
            lambda_reg: self.lambda_reg.unwrap_or(d.lambda_reg),
            seed: self.seed.unwrap_or(d.seed),
            data_term_weight: self.data_weight.unwrap_or(d.data_term_weight),
            log_every: self.log_every.unwrap_or(d.log_every),
            beta: self.beta.unwrap_or(d.beta),
            surface_size,
            surface_channels: self.c2.unwrap_or(d.surface_channels),
            sharpness,
            sharpness_window: self.window.unwrap_or(d.sharpness_window),
            variant,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SynthFlags {
    pub fn overlay(self, file: Self) -> Self {
        overlay!(self, file; focus, f, fnum, pitch, max_coc, layers, crop, noise)
    }

    /// Scene settings with unset fields from [`SceneConfig::default`].
    pub fn to_scene_config(&self, width: usize, height: usize) -> anyhow::Result<SceneConfig> {
        let d = SceneConfig::default();
        let focal_distances = match &self.focus {
            Some(s) => parse_list(s)?,
            None => d.focal_distances,
        };
        dff_core::types::validate_focal_distances(&focal_distances)?;
        let mut camera = CameraParams::new(
            self.f.unwrap_or(d.camera.focal_length),
            self.fnum.unwrap_or(d.camera.f_number),
            self.pitch.unwrap_or(d.camera.pixel_pitch),
        );
        camera.max_coc_px = self.max_coc.unwrap_or(d.camera.max_coc_px);
        camera.validate()?;
        if let Some(&f0) = focal_distances.first() {
            if f0 <= camera.focal_length {
                bail!("focus distances must exceed the focal length {}", camera.focal_length);
            }
        }
        let noise = self.noise.unwrap_or(d.noise);
        if !(noise.is_finite() && noise >= 0.0) {
            bail!("noise must be finite and non-negative");
        }
        let layers = self.layers.unwrap_or(d.layers);
        if layers < 2 {
            bail!("layers must be at least 2");
        }
        Ok(SceneConfig {
            width,
            height,
            focal_distances,
            camera,
            layers,
            noise,
        })
    }
}

/// Parses `N` or `WxH`.
pub fn parse_resolution(s: &str) -> anyhow::Result<(usize, usize)> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .with_context(|| format!("bad resolution {s:?}"))
    };
    match s.split_once(['x', 'X']) {
        Some((w, h)) => Ok((parse(w)?, parse(h)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

/// Parses a comma-separated list of numbers.
pub fn parse_list(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            let t = v.trim();
            t.parse::<f64>().with_context(|| format!("bad number {t:?} in {s:?}"))
        })
        .collect()
}

/// Config file contents split by flag group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub solver: SolverFlags,
    pub synth: SynthFlags,
}

fn keys<T: Serialize + Default>() -> Vec<String> {
    match serde_json::to_value(T::default()).expect("flags serialize") {
        serde_json::Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!("flag groups are structs"),
    }
}

impl ConfigFile {
    /// Parses a JSON object whose keys are flag names with `_` for `-`.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let serde_json::Value::Object(map) = &value else {
            bail!("config must be a JSON object");
        };
        let known: Vec<String> = keys::<SolverFlags>().into_iter().chain(keys::<SynthFlags>()).collect();
        if let Some(k) = map.keys().find(|k| !known.contains(k)) {
            bail!("unknown config key {k:?}");
        }
        let pick = |names: Vec<String>| {
            serde_json::Value::Object(
                map.iter()
                    .filter(|(k, _)| names.contains(k))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect(),
            )
        };
        Ok(Self {
            solver: serde_json::from_value(pick(keys::<SolverFlags>()))?,
            synth: serde_json::from_value(pick(keys::<SynthFlags>()))?,
        })
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }
}
