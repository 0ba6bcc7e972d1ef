//! Subcommands and exit-code policy.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use dff_core::gradcheck::{self, GradCheck};
use dff_core::losses::{self, LossReport};
use dff_core::metrics::{self, MetricsReport};
use dff_core::scenes::{self, SceneConfig, SyntheticScene};
use dff_core::solver::{self, AblationRow, SolverConfig, Variant};
use dff_core::{synth, DepthMap, FocalStack};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigFile, SolverFlags, SynthFlags};
use crate::io::{self, StackManifest, PNG_DEPTH_SCALE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "dff",
    version,
    about = "Depth from focus: synthesize focal stacks, solve, evaluate, ablate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a focal stack from an image and depth map, or a built-in scene
    Synth(SynthArgs),
    /// Recover depth from a focal stack manifest
    Solve(SolveArgs),
    /// Score a predicted depth map against ground truth
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient
    Gradcheck(GradcheckArgs),
    /// Compare the full objective against its ablations
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BuiltinScene {
    /// Textured plane at --near
    Constant,
    /// Textured disc at --near over a textured background at --far
    TwoLayer,
    /// Two-layer geometry with texture only on the left half
    TexturedFlat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// All-in-focus image (PNG)
    #[arg(long, requires = "depth", conflicts_with = "scene")]
    pub rgb: Option<PathBuf>,
    /// Ground-truth depth (PFM in meters or 16-bit PNG in millimeters)
    #[arg(long, requires = "rgb")]
    pub depth: Option<PathBuf>,
    /// Built-in scene to render instead of --rgb/--depth
    #[arg(long, value_enum)]
    pub scene: Option<BuiltinScene>,
    /// Near depth of a built-in scene in meters
    #[arg(long)]
    pub near: Option<f64>,
    /// Far depth of a built-in scene in meters
    #[arg(long)]
    pub far: Option<f64>,
    /// Built-in scene width
    #[arg(long, default_value_t = 48)]
    pub width: usize,
    /// Built-in scene height
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    /// Seed of the built-in scene's texture, depths and noise
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scene name; prefixes every written file
    #[arg(long)]
    pub scene_id: Option<String>,
    /// Manifest to write; planes and depth go beside it
    #[arg(long)]
    pub out_manifest: PathBuf,
    /// JSON file of flag defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub camera: SynthFlags,
}

#[derive(Debug, clap::Args)]
pub struct SolveArgs {
    /// Stack manifest; must reference ground-truth depth
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON file of flag defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverFlags,
    /// Also run these variants (comma separated) and write a comparison table
    #[arg(long)]
    pub ablate: Option<String>,
    /// Fused depth output (.pfm or .png)
    #[arg(long)]
    pub out_depth: Option<PathBuf>,
    /// Focus probabilities output (.npy, height x width x planes)
    #[arg(long)]
    pub out_probs: Option<PathBuf>,
    /// Optimization trace CSV
    #[arg(long)]
    pub trace_csv: Option<PathBuf>,
    /// Final losses and metrics as JSON
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Ablation table CSV (with --ablate); stdout when omitted
    #[arg(long)]
    pub out_table: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Predicted depth (.pfm or .png)
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth depth (.pfm or .png)
    #[arg(long)]
    pub gt: PathBuf,
    /// Focus probabilities (.npy); adds the invalid focus trend
    #[arg(long)]
    pub probs: Option<PathBuf>,
    /// Report format
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub out: Format,
    /// Report file; stdout when omitted
    #[arg(long)]
    pub out_file: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates compared per loss
    #[arg(long, default_value_t = gradcheck::DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Largest accepted relative error
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    pub tol: f64,
    /// JSON results file
    #[arg(long)]
    pub out_file: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct AblateArgs {
    /// Stack manifest with ground-truth depth
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Use the seeded two-layer benchmark scenes instead of a manifest
    #[arg(long)]
    pub synthetic: bool,
    /// Number of benchmark scenes (seeds 0..N)
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Variants compared against the full method (comma separated)
    #[arg(long, default_value = "no_sv,no_fv,no_integrability,no_q,inverse_q")]
    pub variants: String,
    /// JSON file of flag defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverFlags,
    #[command(flatten)]
    pub scene: SynthFlags,
    /// Table format
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub out: Format,
    /// Table file; stdout when omitted
    #[arg(long)]
    pub out_file: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Exit code for a failed run: divergence is distinguished from every other
/// validation or I/O failure.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let diverged = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<dff_core::Error>(),
            Some(dff_core::Error::Diverged { .. })
        )
    });
    if diverged {
        EXIT_DIVERGED
    } else {
        EXIT_INVALID
    }
}

/// Sizes the worker pool from `DFF_THREADS` when set.
fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("DFF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("DFF_THREADS={v:?} is not a positive integer"))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => synth_cmd(a),
        Command::Solve(a) => solve_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

/// Writes to `path` atomically, or to stdout.
fn emit(bytes: &[u8], path: Option<&Path>) -> anyhow::Result<()> {
    match path {
        Some(p) => Ok(io::write_atomic(p, bytes)?),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn json_bytes(value: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

fn csv_bytes<R: Serialize>(rows: impl IntoIterator<Item = R>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

fn parse_variants(s: &str) -> anyhow::Result<Vec<Variant>> {
    let v = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()?;
    if v.is_empty() {
        return Err(dff_core::Error::EmptyVariants.into());
    }
    Ok(v)
}

// ---------------------------------------------------------------- synth

fn synth_cmd(a: SynthArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let flags = a.camera.clone().overlay(file.synth);
    let crop = flags.crop.unwrap_or(0);
    let (stack, depth, default_id) = match (&a.rgb, &a.depth, a.scene) {
        (Some(rgb), Some(depth_path), None) => {
            if flags.noise.is_some() {
                bail!("--noise applies to built-in scenes only");
            }
            let img = io::load_image(rgb)?;
            let depth = io::load_depth(depth_path, PNG_DEPTH_SCALE)?;
            let (img, depth) = if crop > 0 {
                (img.crop(crop)?, depth.crop(crop)?)
            } else {
                (img, depth)
            };
            let (w, h) = img.dims();
            let cfg = flags.to_scene_config(w, h)?;
            let stack = synth::synthesize_stack(&img, &depth, &cfg.focal_distances, &cfg.camera, cfg.layers)?;
            let id = rgb.file_stem().and_then(|s| s.to_str()).unwrap_or("scene").to_string();
            (stack, depth, id)
        }
        (None, None, Some(kind)) => {
            let cfg = flags.to_scene_config(a.width + 2 * crop, a.height + 2 * crop)?;
            let scene = builtin_scene(kind, &cfg, a.near, a.far, a.seed)?;
            let (stack, depth) = if crop > 0 {
                crop_scene(&scene, crop)?
            } else {
                (scene.stack, scene.depth)
            };
            let name = kind.to_possible_value().expect("named").get_name().to_string();
            (stack, depth, format!("{name}-{}", a.seed))
        }
        _ => bail!("give either --rgb with --depth, or --scene"),
    };
    let id = a.scene_id.unwrap_or(default_id);
    write_scene(&id, &stack, &depth, &a.out_manifest)
}

fn builtin_scene(
    kind: BuiltinScene,
    cfg: &SceneConfig,
    near: Option<f64>,
    far: Option<f64>,
    seed: u64,
) -> anyhow::Result<SyntheticScene> {
    let (dn, df) = scenes::random_layer_depths(cfg, seed);
    let (near, far) = (near.unwrap_or(dn), far.unwrap_or(df));
    for d in [near, far] {
        if !(d.is_finite() && d > 0.0) {
            bail!("scene depths must be positive, got {d}");
        }
    }
    Ok(match kind {
        BuiltinScene::Constant => scenes::constant_depth(cfg, near, seed)?,
        BuiltinScene::TwoLayer => scenes::two_layer(cfg, near, far, seed)?,
        BuiltinScene::TexturedFlat => scenes::textured_and_flat(cfg, near, far, seed)?,
    })
}

fn crop_scene(scene: &SyntheticScene, m: usize) -> anyhow::Result<(FocalStack, DepthMap)> {
    let planes = scene
        .stack
        .planes()
        .iter()
        .map(|p| p.crop(m))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        FocalStack::new(planes, scene.stack.focal_distances().to_vec())?,
        scene.depth.crop(m)?,
    ))
}

fn write_scene(id: &str, stack: &FocalStack, depth: &DepthMap, manifest_path: &Path) -> anyhow::Result<()> {
    let dir = manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let names: Vec<PathBuf> = (0..stack.len())
        .map(|n| PathBuf::from(format!("{id}_plane{n}.png")))
        .collect();
    names
        .par_iter()
        .zip(stack.planes())
        .try_for_each(|(name, plane)| io::save_image(plane, &dir.join(name)))?;
    let depth_name = PathBuf::from(format!("{id}_depth.pfm"));
    io::save_depth(depth, &dir.join(&depth_name), PNG_DEPTH_SCALE)?;
    let manifest = StackManifest {
        images: names,
        focal_distances_m: stack.focal_distances().to_vec(),
        depth: Some(depth_name),
        scene_id: id.to_string(),
    };
    io::write_manifest(&manifest, manifest_path)?;
    Ok(())
}

// ---------------------------------------------------------------- solve

#[derive(Debug, Serialize)]
struct TraceRow {
    step: usize,
    total: f64,
    depth: f64,
    sv: f64,
    fv: f64,
    rmse: f64,
    invalid_trend_pct: f64,
}

#[derive(Debug, Serialize)]
struct SolveReport<'a> {
    scene_id: &'a str,
    config: &'a SolverConfig,
    loss: LossReport,
    /// Focal term summed over pixels; `loss.fv_term` is its per-pixel mean.
    fv_sum: f64,
    data_term: f64,
    metrics: MetricsReport,
}

#[derive(Debug, Serialize)]
struct TableRow<'a> {
    scene: &'a str,
    variant: &'a str,
    rmse: f64,
    mse: f64,
    log_rmse: f64,
    absrel: f64,
    sqrel: f64,
    delta1: f64,
    delta2: f64,
    delta3: f64,
    bump: f64,
    invalid_trend_pct: Option<f64>,
    total: f64,
    gradient_error: f64,
}

fn table_row<'a>(scene: &'a str, r: &'a AblationRow) -> TableRow<'a> {
    let m = &r.metrics;
    TableRow {
        scene,
        variant: r.variant.name(),
        rmse: m.rmse,
        mse: m.mse,
        log_rmse: m.log_rmse,
        absrel: m.absrel,
        sqrel: m.sqrel,
        delta1: m.delta1,
        delta2: m.delta2,
        delta3: m.delta3,
        bump: m.bump,
        invalid_trend_pct: m.invalid_trend_pct,
        total: r.report.total,
        gradient_error: r.gradient_error,
    }
}

fn load_supervised(manifest: &Path) -> anyhow::Result<(String, FocalStack, DepthMap)> {
    let m = io::read_manifest(manifest)?;
    let stack = m.load_stack()?;
    let gt = m
        .load_depth()?
        .with_context(|| format!("{}: the solver needs ground-truth depth", manifest.display()))?;
    Ok((m.manifest.scene_id.clone(), stack, gt))
}

/// Full method plus `variants`, solved concurrently and returned in order.
fn ablate_parallel(
    stack: &FocalStack,
    gt: &DepthMap,
    cfg: &SolverConfig,
    variants: &[Variant],
) -> anyhow::Result<Vec<AblationRow>> {
    let all: Vec<Variant> = std::iter::once(Variant::Full)
        .chain(variants.iter().copied().filter(|&v| v != Variant::Full))
        .collect();
    Ok(all
        .par_iter()
        .map(|&v| solver::ablation_row(stack, gt, cfg, v))
        .collect::<Result<Vec<_>, _>>()?)
}

fn solve_cmd(a: SolveArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let cfg = a.solver.clone().overlay(file.solver).to_config()?;
    let variants = a.ablate.as_deref().map(parse_variants).transpose()?;
    let (id, stack, gt) = load_supervised(&a.manifest)?;
    let sol = solver::solve_scene(&stack, &gt, &cfg)?;

    if let Some(p) = &a.out_depth {
        io::save_depth(&sol.depth, p, PNG_DEPTH_SCALE)?;
    }
    if let Some(p) = &a.out_probs {
        io::save_probs(&sol.probs, p)?;
    }
    if let Some(p) = &a.trace_csv {
        let rows = sol.trace.records.iter().map(|r| TraceRow {
            step: r.step,
            total: r.total,
            depth: r.depth,
            sv: r.sv,
            fv: r.fv,
            rmse: r.rmse,
            invalid_trend_pct: r.invalid_trend_pct,
        });
        io::write_atomic(p, &csv_bytes(rows)?)?;
    }
    let last = sol.trace.records.last().expect("trace has the final record");
    let report = SolveReport {
        scene_id: &id,
        config: &cfg,
        loss: sol.report,
        fv_sum: losses::focal_variational_loss(&sol.probs).value,
        data_term: last.data,
        metrics: metrics::evaluate_with_probs(&sol.depth, &gt, &sol.probs)?,
    };
    match &a.report {
        Some(p) => io::write_atomic(p, &json_bytes(&report))?,
        None => eprintln!(
            "{id}: rmse {:.6} total {:.6} invalid trend {:.2}%",
            report.metrics.rmse, report.loss.total, last.invalid_trend_pct
        ),
    }
    if let Some(v) = variants {
        let rows = ablate_parallel(&stack, &gt, &cfg, &v)?;
        emit(
            &csv_bytes(rows.iter().map(|r| table_row(&id, r)))?,
            a.out_table.as_deref(),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let pred = io::load_depth(&a.pred, PNG_DEPTH_SCALE)?;
    let gt = io::load_depth(&a.gt, PNG_DEPTH_SCALE)?;
    let report = match &a.probs {
        Some(p) => metrics::evaluate_with_probs(&pred, &gt, &io::load_probs(p)?)?,
        None => metrics::evaluate(&pred, &gt)?,
    };
    let bytes = match a.out {
        Format::Json => json_bytes(&report),
        Format::Csv => csv_bytes([&report])?,
    };
    emit(&bytes, a.out_file.as_deref())
}

// ---------------------------------------------------------------- gradcheck

fn gradcheck_cmd(a: GradcheckArgs) -> anyhow::Result<()> {
    if a.samples == 0 {
        bail!("--samples must be positive");
    }
    if !(a.tol.is_finite() && a.tol > 0.0) {
        bail!("--tol must be positive");
    }
    type Check = fn(u64, usize) -> dff_core::Result<GradCheck>;
    let checks: [Check; 5] = [
        gradcheck::check_spatial,
        gradcheck::check_focal,
        gradcheck::check_depth,
        gradcheck::check_projection,
        gradcheck::check_objective,
    ];
    let results = checks
        .par_iter()
        .map(|c| c(a.seed, a.samples))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &results {
        println!(
            "{:<12} max_rel_error {:.3e}  checked {:>3}  skipped {:>3}  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.passed(a.tol) { "ok" } else { "FAIL" }
        );
    }
    if let Some(p) = &a.out_file {
        io::write_atomic(p, &json_bytes(&results))?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed(a.tol)).map(|r| r.name).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

// ---------------------------------------------------------------- ablate

#[derive(Debug, Serialize)]
struct VariantSummary {
    variant: &'static str,
    median_rmse: f64,
    /// Whether the full method's median RMSE is at most this variant's.
    full_not_worse: bool,
}

#[derive(Debug, Serialize)]
struct AblationTable<'a> {
    rows: Vec<TableRow<'a>>,
    summary: Vec<VariantSummary>,
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ablate_cmd(a: AblateArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let cfg = a.solver.clone().overlay(file.solver).to_config()?;
    let variants = parse_variants(&a.variants)?;
    let results: Vec<(String, Vec<AblationRow>)> = if a.synthetic {
        if a.seeds == 0 {
            bail!("--seeds must be positive");
        }
        let scene_cfg = a.scene.clone().overlay(file.synth).to_scene_config(48, 48)?;
        (0..a.seeds)
            .into_par_iter()
            .map(|seed| -> anyhow::Result<_> {
                let (near, far) = scenes::random_layer_depths(&scene_cfg, seed);
                let scene = scenes::two_layer(&scene_cfg, near, far, seed)?;
                Ok((
                    format!("seed{seed}"),
                    ablate_parallel(&scene.stack, &scene.depth, &cfg, &variants)?,
                ))
            })
            .collect::<anyhow::Result<Vec<_>>>()?
    } else {
        let manifest = a.manifest.as_deref().expect("clap requires a manifest");
        let (id, stack, gt) = load_supervised(manifest)?;
        vec![(id, ablate_parallel(&stack, &gt, &cfg, &variants)?)]
    };

    let order: Vec<Variant> = results[0].1.iter().map(|r| r.variant).collect();
    let medians: Vec<f64> = (0..order.len())
        .map(|i| median(&results.iter().map(|(_, rows)| rows[i].metrics.rmse).collect::<Vec<_>>()))
        .collect();
    let summary: Vec<VariantSummary> = order
        .iter()
        .zip(&medians)
        .map(|(v, &m)| VariantSummary {
            variant: v.name(),
            median_rmse: m,
            full_not_worse: medians[0] <= m,
        })
        .collect();
    let rows: Vec<TableRow> = results
        .iter()
        .flat_map(|(id, rows)| rows.iter().map(move |r| table_row(id, r)))
        .collect();
    let bytes = match a.out {
        Format::Json => json_bytes(&AblationTable { rows, summary }),
        Format::Csv => {
            for s in &summary {
                eprintln!(
                    "{:<18} median rmse {:.6}{}",
                    s.variant,
                    s.median_rmse,
                    if s.full_not_worse { "" } else { "  (beats full)" }
                );
            }
            csv_bytes(rows)?
        }
    };
    emit(&bytes, a.out_file.as_deref())
}
