//! Direct per-scene optimization of the combined objective.
//!
//! The optimized state is per-pixel focus logits, a low-resolution gradient
//! field `Γ` and the channel-fusion map `θ`. Every evaluation re-projects `Γ`
//! onto integrable surfaces, so the spatial loss reaches `Γ` through the
//! adjoint of the projection.
//!
//! The objective is
//!
//! ```text
//! J = depth + λ_sv · sv / (h_s · w_s) + λ_fv · fv / (H · W) + w_data · data
//! ```
//!
//! where `depth` and the cross-entropy `data` anchor are pixel means. Logits
//! step by `lr` times the pixel count, i.e. plain gradient descent on the
//! per-pixel form of `J`. `Γ` steps by `lr` and `θ` by `lr / 1000`.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::{self, FocusLogits};
use crate::gradcheck;
use crate::losses::{
    self, GradFusionMap, GradientTarget, LossReport, SharpnessWeights, DEFAULT_BETA, DEFAULT_LAMBDA_FV,
    DEFAULT_LAMBDA_SV,
};
use crate::math;
use crate::metrics::{self, MetricsReport, DEFAULT_TREND_TOL};
use crate::rng;
use crate::surface::{
    Backend, GradientField, Projector, SurfaceField, DEFAULT_LAMBDA_REG, DEFAULT_SURFACE_CHANNELS, DEFAULT_SURFACE_SIZE,
};
use crate::types::{DepthMap, FocalStack, FocusProbabilityMap};
use crate::volume::{self, SharpnessKind, DEFAULT_SHARPNESS_WINDOW};

/// Objective variants compared in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Variant {
    #[default]
    Full,
    /// No spatial term.
    NoSv,
    /// No focal term.
    NoFv,
    /// Spatial term applied to `θ(Γ)` without the integrability projection.
    NoIntegrability,
    /// Uniform plane weights instead of `q`.
    NoQ,
    /// `(1 − q)` renormalized instead of `q`.
    InverseQ,
}

impl Variant {
    pub const ABLATIONS: [Variant; 5] = [
        Variant::NoSv,
        Variant::NoFv,
        Variant::NoIntegrability,
        Variant::NoQ,
        Variant::InverseQ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSv => "no_sv",
            Variant::NoFv => "no_fv",
            Variant::NoIntegrability => "no_integrability",
            Variant::NoQ => "no_q",
            Variant::InverseQ => "inverse_q",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::Full]
            .into_iter()
            .chain(Variant::ABLATIONS)
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SolverConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_sv: f64,
    pub lambda_fv: f64,
    pub lambda_reg: f64,
    pub seed: u64,
    pub data_term_weight: f64,
    pub log_every: usize,
    pub beta: f64,
    /// Surface working resolution `(width, height)`.
    pub surface_size: (usize, usize),
    pub surface_channels: usize,
    pub sharpness: SharpnessKind,
    pub sharpness_window: usize,
    pub variant: Variant,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.05,
            lambda_sv: DEFAULT_LAMBDA_SV,
            lambda_fv: DEFAULT_LAMBDA_FV,
            lambda_reg: DEFAULT_LAMBDA_REG,
            seed: 0,
            data_term_weight: 0.3,
            log_every: 10,
            beta: DEFAULT_BETA,
            surface_size: (DEFAULT_SURFACE_SIZE, DEFAULT_SURFACE_SIZE),
            surface_channels: DEFAULT_SURFACE_CHANNELS,
            sharpness: SharpnessKind::LaplacianSq,
            sharpness_window: DEFAULT_SHARPNESS_WINDOW,
            variant: Variant::Full,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive"));
        }
        if !nonneg(self.lambda_sv) || !nonneg(self.lambda_fv) || !nonneg(self.data_term_weight) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative"));
        }
        if !nonneg(self.lambda_reg) {
            return Err(Error::InvalidConfig("lambda_reg must be finite and non-negative"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidConfig("beta must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be at least 1"));
        }
        if self.surface_size.0 < 2 || self.surface_size.1 < 2 {
            return Err(Error::InvalidConfig("surface resolution must be at least 2x2"));
        }
        if self.surface_channels == 0 {
            return Err(Error::InvalidConfig("surface channels must be at least 1"));
        }
        if self.sharpness_window.is_multiple_of(2) {
            return Err(Error::InvalidConfig("sharpness window must be odd"));
        }
        Ok(())
    }

    /// The configuration with the variant's weight changes applied.
    fn effective(&self) -> Self {
        let mut c = self.clone();
        match self.variant {
            Variant::NoSv => c.lambda_sv = 0.0,
            Variant::NoFv => c.lambda_fv = 0.0,
            _ => {}
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceRecord {
    pub step: usize,
    pub total: f64,
    pub depth: f64,
    pub sv: f64,
    pub fv: f64,
    pub data: f64,
    /// `total + w_data · data`, the quantity being minimized.
    pub objective: f64,
    pub rmse: f64,
    pub invalid_trend_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverTrace {
    pub records: Vec<TraceRecord>,
}

/// Optimization unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub logits: FocusLogits,
    pub gamma: GradientField,
    pub theta: GradFusionMap,
}

impl SolverState {
    /// Number of scalar unknowns across all blocks.
    pub fn len(&self) -> usize {
        self.logits.values().len() + self.gamma.data().len() + self.theta.params().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mutable access to scalar `i` in logits, gamma, theta order.
    pub fn coord_mut(&mut self, i: usize) -> &mut f64 {
        let a = self.logits.values().len();
        let b = self.gamma.data().len();
        if i < a {
            &mut self.logits.values_mut()[i]
        } else if i < a + b {
            &mut self.gamma.data_mut()[i - a]
        } else {
            &mut self.theta.params_mut()[i - a - b]
        }
    }
}

/// Everything one objective evaluation produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: LossReport,
    pub data: f64,
    pub objective: f64,
    pub probs: FocusProbabilityMap,
    pub depth: DepthMap,
    pub surface: SurfaceField,
    pub grad_logits: Vec<f64>,
    pub grad_gamma: Vec<f64>,
    pub grad_theta: Vec<f64>,
}

impl Evaluation {
    /// Gradient entry `i` in [`SolverState::coord_mut`] order.
    pub fn grad(&self, i: usize) -> f64 {
        let a = self.grad_logits.len();
        let b = self.grad_gamma.len();
        if i < a {
            self.grad_logits[i]
        } else if i < a + b {
            self.grad_gamma[i - a]
        } else {
            self.grad_theta[i - a - b]
        }
    }
}

/// Precomputed, immutable parts of one scene's objective.
#[derive(Debug, Clone)]
pub struct Problem {
    cfg: SolverConfig,
    focal: Vec<f64>,
    gt: DepthMap,
    target: GradientTarget,
    /// Plane weights used by the spatial term (variant-dependent).
    weights: SharpnessWeights,
    /// Plane weights from the ground truth, for reporting.
    true_weights: SharpnessWeights,
    data_target: Vec<f64>,
    projector: Projector,
    width: usize,
    height: usize,
}

/// Logit step per unit learning rate and pixel. Every per-pixel term is a
/// mean over the image, so without the pixel factor a logit would move by
/// `1/HW` of its own gradient.
const LOGIT_STEP: f64 = 10.0;
/// `θ` is shared by every plane and pixel, so its L1 subgradient is large
/// and does not shrink near the optimum; it takes a reduced step.
const THETA_STEP: f64 = 1e-2;

/// Per-pixel softmax of raw sharpness over planes.
fn sharpness_target(stack: &FocalStack, kind: SharpnessKind, window: usize) -> Result<Vec<f64>> {
    let s = volume::sharpness_measure(stack, kind, window)?;
    let (w, h) = s.dims();
    let n = s.planes();
    let mut t = vec![0.0; w * h * n];
    for i in 0..w * h {
        math::softmax_into(&s.pixel(i), &mut t[i * n..(i + 1) * n]);
    }
    Ok(t)
}

impl Problem {
    pub fn new(stack: &FocalStack, gt: &DepthMap, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        if stack.dims() != gt.dims() {
            return Err(Error::DimensionMismatch {
                expected: stack.dims(),
                found: gt.dims(),
            });
        }
        gt.require_valid()?;
        let (sw, sh) = cfg.surface_size;
        if sw > stack.width() || sh > stack.height() {
            return Err(Error::InvalidConfig("surface resolution exceeds image size"));
        }
        let cfg = cfg.effective();
        let focal = stack.focal_distances().to_vec();
        let target = GradientTarget::from_depth(gt, sw, sh)?;
        let true_weights = losses::sharpness_weights(target.depth(), &focal)?;
        let weights = match cfg.variant {
            Variant::NoQ => true_weights.uniform(),
            Variant::InverseQ => true_weights.inverted(),
            _ => true_weights.clone(),
        };
        let data_target = sharpness_target(stack, cfg.sharpness, cfg.sharpness_window)?;
        let projector = Projector::new(sw, sh, cfg.lambda_reg, Backend::Auto)?;
        Ok(Self {
            focal,
            gt: gt.clone(),
            target,
            weights,
            true_weights,
            data_target,
            projector,
            width: stack.width(),
            height: stack.height(),
            cfg,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    /// Zero logits (uniform focus), zero `Γ`, small random `θ`.
    pub fn initial_state(&self) -> SolverState {
        let (sw, sh) = self.cfg.surface_size;
        let c = self.cfg.surface_channels;
        let n = self.focal.len();
        SolverState {
            logits: FocusLogits::zeros(self.width, self.height, n),
            gamma: GradientField::zeros(sw, sh, c, n),
            theta: GradFusionMap::random(c, &mut rng::stream(self.cfg.seed, "solver.theta")),
        }
    }

    fn spatial(&self, state: &SolverState, weights: &SharpnessWeights) -> Result<(SurfaceField, losses::SpatialLoss)> {
        let surface = self.projector.project(&state.gamma)?;
        let loss = if self.cfg.variant == Variant::NoIntegrability {
            losses::direct_gradient_loss(&state.gamma, &state.theta, &self.target, weights)?
        } else {
            losses::spatial_variational_loss(&surface, &state.theta, &self.target, weights)?
        };
        Ok((surface, loss))
    }

    /// Spatial term under the ground-truth `q`, normalized per surface pixel.
    pub fn gradient_error(&self, state: &SolverState) -> Result<f64> {
        let (sw, sh) = self.cfg.surface_size;
        Ok(self.spatial(state, &self.true_weights)?.1.value / (sw * sh) as f64)
    }

    /// Hash of every piecewise regime the objective passes through: argmax and
    /// hinge activity of the focal term, residual signs of the spatial term and
    /// the quadratic/linear branch of the depth loss.
    pub(crate) fn regime_signature(&self, state: &SolverState) -> Result<u64> {
        let mut sig = gradcheck::Signature::default();
        let probs = fusion::to_probabilities(&state.logits);
        gradcheck::focal_signature(&mut sig, &probs);
        let depth = fusion::depth_from_probabilities(&probs, &self.focal)?;
        for ((p, t), &m) in depth.values().iter().zip(self.gt.values()).zip(self.gt.mask()) {
            if m {
                sig.push((math::abs(p - t) < self.cfg.beta) as u64);
            }
        }
        if self.cfg.variant == Variant::NoIntegrability {
            let split = losses::split_gradient_field(&state.gamma);
            let inputs: Vec<[&[f64]; 2]> = split.iter().map(|[a, b]| [a.as_slice(), b.as_slice()]).collect();
            gradcheck::spatial_signature(&mut sig, &inputs, &state.theta, &self.target);
        } else {
            let z = self.projector.project(&state.gamma)?;
            gradcheck::surface_signature(&mut sig, &z, &state.theta, &self.target);
        }
        Ok(sig.finish())
    }

    /// Objective value and its gradient with respect to every unknown.
    pub fn evaluate(&self, state: &SolverState) -> Result<Evaluation> {
        let cfg = &self.cfg;
        let n = self.focal.len();
        let pixels = (self.width * self.height) as f64;
        let (sw, sh) = cfg.surface_size;
        let surf_pixels = (sw * sh) as f64;

        let probs = fusion::to_probabilities(&state.logits);
        let depth = fusion::depth_from_probabilities(&probs, &self.focal)?;
        let dl = losses::depth_loss(&depth, &self.gt, cfg.beta)?;
        let fv = losses::focal_variational_loss(&probs);

        let mut grad_p = vec![0.0; probs.probs().len()];
        for (i, g) in grad_p.chunks_exact_mut(n).enumerate() {
            for (gn, f) in g.iter_mut().zip(&self.focal) {
                *gn = dl.grad[i] * f;
            }
        }
        if cfg.lambda_fv > 0.0 {
            let s = cfg.lambda_fv / pixels;
            for (g, f) in grad_p.iter_mut().zip(&fv.grad) {
                *g += s * f;
            }
        }
        let mut grad_logits = fusion::probabilities_backward(&probs, &grad_p);

        let mut ce = Vec::with_capacity(self.width * self.height);
        for (px, t) in probs.iter_pixels().zip(self.data_target.chunks_exact(n)) {
            ce.push(-px.iter().zip(t).map(|(p, t)| t * math::ln(p.max(1e-300))).sum::<f64>());
        }
        let data = math::pairwise_sum(&ce) / pixels;
        if cfg.data_term_weight > 0.0 {
            let s = cfg.data_term_weight / pixels;
            for ((g, p), t) in grad_logits.iter_mut().zip(probs.probs()).zip(&self.data_target) {
                *g += s * (p - t);
            }
        }

        let (surface, sv) = self.spatial(state, &self.weights)?;
        let mut grad_gamma = vec![0.0; state.gamma.data().len()];
        let mut grad_theta = vec![0.0; state.theta.params().len()];
        if cfg.lambda_sv > 0.0 {
            let s = cfg.lambda_sv / surf_pixels;
            let scaled: Vec<f64> = sv.grad_input.iter().map(|g| g * s).collect();
            if cfg.variant == Variant::NoIntegrability {
                grad_gamma = scaled;
            } else {
                let mut gg = GradientField::zeros(sw, sh, cfg.surface_channels, n);
                self.projector.backward(&scaled, &mut gg)?;
                grad_gamma.copy_from_slice(gg.data());
            }
            for (g, v) in grad_theta.iter_mut().zip(&sv.grad_theta) {
                *g = v * s;
            }
        }

        let report = losses::total_loss(dl.value, sv.value / surf_pixels, fv.mean, cfg.lambda_sv, cfg.lambda_fv);
        let objective = report.total + cfg.data_term_weight * data;
        Ok(Evaluation {
            report,
            data,
            objective,
            probs,
            depth,
            surface,
            grad_logits,
            grad_gamma,
            grad_theta,
        })
    }

    /// One descent step in place.
    pub fn step(&self, state: &mut SolverState, eval: &Evaluation) {
        let lr = self.cfg.learning_rate;
        let pixels = (self.width * self.height) as f64;
        for (v, g) in state.logits.values_mut().iter_mut().zip(&eval.grad_logits) {
            *v -= lr * LOGIT_STEP * pixels * g;
        }
        for (v, g) in state.gamma.data_mut().iter_mut().zip(&eval.grad_gamma) {
            *v -= lr * g;
        }
        for (v, g) in state.theta.params_mut().iter_mut().zip(&eval.grad_theta) {
            *v -= lr * THETA_STEP * g;
        }
    }

    fn record(&self, step: usize, eval: &Evaluation) -> Result<TraceRecord> {
        let m = metrics::evaluate(&eval.depth, &self.gt)?;
        Ok(TraceRecord {
            step,
            total: eval.report.total,
            depth: eval.report.depth_term,
            sv: eval.report.sv_term,
            fv: eval.report.fv_term,
            data: eval.data,
            objective: eval.objective,
            rmse: m.rmse,
            invalid_trend_pct: metrics::invalid_focus_trend(&eval.probs, DEFAULT_TREND_TOL),
        })
    }
}

/// Result of [`solve_scene`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub depth: DepthMap,
    pub probs: FocusProbabilityMap,
    pub surface: SurfaceField,
    pub state: SolverState,
    pub report: LossReport,
    pub trace: SolverTrace,
}

/// Runs `cfg.steps` descent steps from the initial state. Logged records are
/// the initial state, every `log_every`-th step and the final step.
///
/// Fails with [`Error::Diverged`] once the objective exceeds ten times its
/// initial value or stops being finite.
pub fn solve_scene(stack: &FocalStack, gt: &DepthMap, cfg: &SolverConfig) -> Result<Solution> {
    let problem = Problem::new(stack, gt, cfg)?;
    let mut state = problem.initial_state();
    let mut trace = SolverTrace::default();
    let mut initial = None;
    let mut step = 0;
    loop {
        let eval = problem.evaluate(&state)?;
        let start = *initial.get_or_insert(eval.objective);
        if !eval.objective.is_finite() || eval.objective > 10.0 * start {
            return Err(Error::Diverged {
                step,
                objective: eval.objective,
                initial: start,
            });
        }
        let last = step == cfg.steps;
        if step % cfg.log_every == 0 || last {
            trace.records.push(problem.record(step, &eval)?);
        }
        if last {
            return Ok(Solution {
                depth: eval.depth,
                probs: eval.probs,
                surface: eval.surface,
                state,
                report: eval.report,
                trace,
            });
        }
        problem.step(&mut state, &eval);
        step += 1;
    }
}

/// One ablation outcome.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: MetricsReport,
    pub report: LossReport,
    /// Spatial term under the ground-truth weights after optimization.
    pub gradient_error: f64,
}

/// Solves the scene under `variant` and scores it.
pub fn ablation_row(stack: &FocalStack, gt: &DepthMap, cfg: &SolverConfig, variant: Variant) -> Result<AblationRow> {
    let cfg = SolverConfig { variant, ..cfg.clone() };
    let problem = Problem::new(stack, gt, &cfg)?;
    let sol = solve_scene(stack, gt, &cfg)?;
    let metrics = metrics::evaluate_with_probs(&sol.depth, gt, &sol.probs)?;
    Ok(AblationRow {
        variant,
        metrics,
        report: sol.report,
        gradient_error: problem.gradient_error(&sol.state)?,
    })
}

/// The full method followed by each requested variant.
pub fn ablate(stack: &FocalStack, gt: &DepthMap, cfg: &SolverConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::EmptyVariants);
    }
    core::iter::once(Variant::Full)
        .chain(variants.iter().copied().filter(|&v| v != Variant::Full))
        .map(|v| ablation_row(stack, gt, cfg, v))
        .collect()
}
