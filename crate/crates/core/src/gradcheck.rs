//! Central finite-difference checks of every analytic gradient.
//!
//! Each check perturbs randomly chosen coordinates by `±h` and compares the
//! symmetric difference quotient with the analytic gradient. Piecewise losses
//! expose a regime signature (residual signs, active hinges, argmax indices);
//! a coordinate whose perturbation changes the signature sits on a kink and is
//! skipped rather than compared.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::fusion::{self, FocusLogits};
use crate::losses::{self, GradFusionMap, GradientTarget, SharpnessWeights};
use crate::math;
use crate::rng;
use crate::scenes::{self, SceneConfig};
use crate::solver::{Problem, SolverConfig, SolverState};
use crate::surface::{Backend, GradientField, Projector, SurfaceField, DEFAULT_LAMBDA_REG};
use crate::synth::CameraParams;
use crate::types::{DepthMap, FocusProbabilityMap};

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_SAMPLES: usize = 50;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor so exact zeros compare as zero error.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of one finite-difference check.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    math::abs(analytic - numeric) / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Order-sensitive fold used for regime signatures.
#[derive(Debug, Clone, Copy)]
pub struct Signature(u64);

impl Default for Signature {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Signature {
    pub fn push(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x0100_0000_01b3);
    }

    pub fn push_sign(&mut self, v: f64) {
        self.push(if v > 0.0 {
            1
        } else if v < 0.0 {
            2
        } else {
            3
        });
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// Compares `analytic` against central differences of `f` at `samples`
/// coordinates of `x` drawn from `rng`. Gives up after `20 · samples` draws.
pub fn check_coordinates<F, S>(
    name: &'static str,
    x: &[f64],
    analytic: &[f64],
    samples: usize,
    rng: &mut impl Rng,
    mut f: F,
    mut signature: S,
) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
    S: FnMut(&[f64]) -> Result<u64>,
{
    assert_eq!(x.len(), analytic.len(), "gradient length must match the point");
    let base = signature(x)?;
    let mut probe = x.to_vec();
    let mut out = GradCheck {
        name,
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut attempts = 0;
    while out.checked < samples && attempts < 20 * samples && !x.is_empty() {
        attempts += 1;
        let i = rng.random_range(0..x.len());
        probe[i] = x[i] + FD_STEP;
        let sp = signature(&probe)?;
        let fp = f(&probe)?;
        probe[i] = x[i] - FD_STEP;
        let sm = signature(&probe)?;
        let fm = f(&probe)?;
        probe[i] = x[i];
        if sp != base || sm != base {
            out.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        out.max_rel_error = out.max_rel_error.max(relative_error(analytic[i], numeric));
        out.checked += 1;
    }
    Ok(out)
}

fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

const FOCAL: [f64; 4] = [0.6, 1.1, 1.7, 2.4];

struct SpatialFixture {
    target: GradientTarget,
    q: SharpnessWeights,
    channels: usize,
    planes: usize,
}

impl SpatialFixture {
    fn new(rng: &mut impl Rng) -> Result<Self> {
        let (w, h) = (7, 6);
        let gt = DepthMap::new(2 * w, 2 * h, uniform_vec(rng, 4 * w * h, 0.5, 2.5))?;
        let target = GradientTarget::from_depth(&gt, w, h)?;
        let q = losses::sharpness_weights(target.depth(), &FOCAL)?;
        Ok(Self {
            target,
            q,
            channels: 3,
            planes: FOCAL.len(),
        })
    }

    fn split(&self, x: &[f64]) -> Result<(SurfaceField, GradFusionMap)> {
        let (w, h) = self.target.dims();
        let nz = self.channels * self.planes * w * h;
        let z = SurfaceField::from_raw(w, h, self.channels, self.planes, x[..nz].to_vec())?;
        let theta = GradFusionMap::from_params(self.channels, x[nz..].to_vec())?;
        Ok((z, theta))
    }
}

/// Residual-sign signature of the spatial loss for per-plane `[x, y]` inputs.
pub(crate) fn spatial_signature(
    sig: &mut Signature,
    inputs: &[[&[f64]; 2]],
    theta: &GradFusionMap,
    target: &GradientTarget,
) {
    let (w, h) = target.dims();
    let mut pred = vec![0.0; 2 * w * h];
    for input in inputs {
        theta.apply(*input, w, h, &mut pred);
        for ((p, t), &v) in pred.iter().zip(target.grad()).zip(target.valid()) {
            if v {
                sig.push_sign(p - t);
            }
        }
    }
}

/// [`spatial_signature`] of a surface field, which feeds each plane to both
/// inputs.
pub(crate) fn surface_signature(sig: &mut Signature, z: &SurfaceField, theta: &GradFusionMap, target: &GradientTarget) {
    let inputs: Vec<[&[f64]; 2]> = (0..z.planes()).map(|n| [z.plane(n), z.plane(n)]).collect();
    spatial_signature(sig, &inputs, theta, target);
}

/// Argmax and hinge-activity signature of the focal loss.
pub(crate) fn focal_signature(sig: &mut Signature, p: &FocusProbabilityMap) {
    for px in p.iter_pixels() {
        sig.push(math::argmax_first(px) as u64);
        for pair in px.windows(2) {
            sig.push_sign(pair[1] - pair[0]);
        }
    }
}

/// Spatial loss with respect to the surface field and `θ` jointly.
pub fn check_spatial(seed: u64, samples: usize) -> Result<GradCheck> {
    let mut rng = rng::stream(seed, "gradcheck.spatial");
    let fx = SpatialFixture::new(&mut rng)?;
    let (w, h) = fx.target.dims();
    let nz = fx.channels * fx.planes * w * h;
    let mut x = uniform_vec(&mut rng, nz, -1.0, 1.0);
    x.extend(GradFusionMap::random(fx.channels, &mut rng).params());
    let (z, theta) = fx.split(&x)?;
    let loss = losses::spatial_variational_loss(&z, &theta, &fx.target, &fx.q)?;
    let mut analytic = loss.grad_input.clone();
    analytic.extend(&loss.grad_theta);
    check_coordinates(
        "spatial",
        &x,
        &analytic,
        samples,
        &mut rng,
        |x| {
            let (z, theta) = fx.split(x)?;
            Ok(losses::spatial_variational_loss(&z, &theta, &fx.target, &fx.q)?.value)
        },
        |x| {
            let (z, theta) = fx.split(x)?;
            let mut sig = Signature::default();
            surface_signature(&mut sig, &z, &theta, &fx.target);
            Ok(sig.finish())
        },
    )
}

/// Focal loss with respect to the probabilities, treated as free variables.
pub fn check_focal(seed: u64, samples: usize) -> Result<GradCheck> {
    let mut rng = rng::stream(seed, "gradcheck.focal");
    let (w, h, n) = (6, 5, 5);
    let logits = FocusLogits::new(w, h, n, uniform_vec(&mut rng, w * h * n, -2.0, 2.0))?;
    let p = fusion::to_probabilities(&logits);
    let x = p.probs().to_vec();
    let analytic = losses::focal_variational_loss(&p).grad;
    let wrap = |x: &[f64]| FocusProbabilityMap::from_parts_unchecked(w, h, n, x.to_vec());
    check_coordinates(
        "focal",
        &x,
        &analytic,
        samples,
        &mut rng,
        |x| Ok(losses::focal_variational_loss(&wrap(x)).value),
        |x| {
            let mut sig = Signature::default();
            focal_signature(&mut sig, &wrap(x));
            Ok(sig.finish())
        },
    )
}

/// Smooth-L1 depth loss with respect to the prediction.
pub fn check_depth(seed: u64, samples: usize) -> Result<GradCheck> {
    let mut rng = rng::stream(seed, "gradcheck.depth");
    let (w, h) = (8, 7);
    let beta = losses::DEFAULT_BETA;
    let mut gt_values = uniform_vec(&mut rng, w * h, 0.5, 3.0);
    for v in gt_values.iter_mut().step_by(9) {
        *v = 0.0;
    }
    let gt = DepthMap::new(w, h, gt_values)?;
    let x = uniform_vec(&mut rng, w * h, 0.2, 4.0);
    let pred = DepthMap::with_mask(w, h, x.clone(), vec![true; w * h])?;
    let analytic = losses::depth_loss(&pred, &gt, beta)?.grad;
    let wrap = |x: &[f64]| DepthMap::with_mask(w, h, x.to_vec(), vec![true; w * h]);
    check_coordinates(
        "depth",
        &x,
        &analytic,
        samples,
        &mut rng,
        |x| Ok(losses::depth_loss(&wrap(x)?, &gt, beta)?.value),
        |x| {
            let mut sig = Signature::default();
            for ((p, t), &m) in x.iter().zip(gt.values()).zip(gt.mask()) {
                if m {
                    sig.push((math::abs(p - t) < beta) as u64);
                }
            }
            Ok(sig.finish())
        },
    )
}

/// Adjoint pass of the integrability projection, through a random linear
/// functional of the projected surface.
pub fn check_projection(seed: u64, samples: usize) -> Result<GradCheck> {
    let mut rng = rng::stream(seed, "gradcheck.projection");
    let (w, h, c, n) = (6, 5, 2, 2);
    let projector = Projector::new(w, h, DEFAULT_LAMBDA_REG, Backend::Auto)?;
    let x = uniform_vec(&mut rng, 2 * w * h * c * n, -1.0, 1.0);
    let probe = uniform_vec(&mut rng, w * h * c * n, -1.0, 1.0);
    let mut grad = GradientField::zeros(w, h, c, n);
    projector.backward(&probe, &mut grad)?;
    let analytic = grad.data().to_vec();
    check_coordinates(
        "projection",
        &x,
        &analytic,
        samples,
        &mut rng,
        |x| {
            let gamma = GradientField::from_data(w, h, c, n, x.to_vec())?;
            let z = projector.project(&gamma)?;
            Ok(math::pairwise_sum(
                &z.data().iter().zip(&probe).map(|(a, b)| a * b).collect::<Vec<_>>(),
            ))
        },
        |_| Ok(0),
    )
}

/// The solver's full objective with respect to logits, `Γ` and `θ`.
pub fn check_objective(seed: u64, samples: usize) -> Result<GradCheck> {
    let mut rng = rng::stream(seed, "gradcheck.objective");
    let scene_cfg = SceneConfig {
        width: 16,
        height: 16,
        focal_distances: FOCAL.to_vec(),
        camera: CameraParams::new(0.025, 2.0, 2e-5),
        layers: 8,
        noise: 0.01,
    };
    let (near, far) = scenes::random_layer_depths(&scene_cfg, seed);
    let scene = scenes::two_layer(&scene_cfg, near, far, seed)?;
    let cfg = SolverConfig {
        surface_size: (6, 6),
        surface_channels: 3,
        seed,
        ..SolverConfig::default()
    };
    let problem = Problem::new(&scene.stack, &scene.depth, &cfg)?;
    let mut state = problem.initial_state();
    for i in 0..state.len() {
        *state.coord_mut(i) = rng.random_range(-1.0..1.0);
    }
    check_problem_at(&problem, &state, samples, &mut rng)
}

/// Checks the full solver objective of `problem` around `state`.
pub fn check_problem_at(
    problem: &Problem,
    state: &SolverState,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<GradCheck> {
    let eval = problem.evaluate(state)?;
    let mut scratch = state.clone();
    let x: Vec<f64> = (0..scratch.len()).map(|i| *scratch.coord_mut(i)).collect();
    let analytic: Vec<f64> = (0..x.len()).map(|i| eval.grad(i)).collect();
    let load = |x: &[f64]| {
        let mut s = state.clone();
        for (i, v) in x.iter().enumerate() {
            *s.coord_mut(i) = *v;
        }
        s
    };
    check_coordinates(
        "objective",
        &x,
        &analytic,
        samples,
        rng,
        |x| Ok(problem.evaluate(&load(x))?.objective),
        |x| {
            for (i, v) in x.iter().enumerate() {
                *scratch.coord_mut(i) = *v;
            }
            problem.regime_signature(&scratch)
        },
    )
}

/// Every check with the default sample count.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    Ok(vec![
        check_spatial(seed, DEFAULT_SAMPLES)?,
        check_focal(seed, DEFAULT_SAMPLES)?,
        check_depth(seed, DEFAULT_SAMPLES)?,
        check_projection(seed, DEFAULT_SAMPLES)?,
        check_objective(seed, DEFAULT_SAMPLES)?,
    ])
}
