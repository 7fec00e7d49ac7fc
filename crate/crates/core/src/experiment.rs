//! Experiment orchestration: optional synthesis, solve, evaluation, and the
//! on-disk result bundle.
//!
//! A bundle directory holds float rasters as PFM, viewables as PNG/SVG, poses
//! and metrics as JSON, the accepted-step history as CSV, and a manifest that
//! lists every other file with its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_depth, pearson, translation_direction_error, DepthMetrics, DEFAULT_DEPTH_CAP};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::image::{DepthMap, ImageBuffer};
use crate::io::{
    flow_to_raster, heatmap, history_csv, loss_curve_svg, mask_image, quantize_f32, read_image, read_json,
    read_pfm, sha256_file, sha256_hex, to_json_bytes, write_bytes, write_image, write_json, write_pfm, BitDepth,
    encode_pfm,
};
use crate::losses::LossBreakdown;
use crate::solver::{solve, HistoryEntry, SolveConfig, SolveResult};
use crate::synth::{
    apply_illumination, clamped_footprint, render, target_brightness_change, IlluminationSpec, SceneSpec,
};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.json";
pub const HISTORY: &str = "history.csv";
pub const CONFIG: &str = "config.json";
pub const DEPTH: &str = "depth.pfm";
pub const GT_DEPTH: &str = "gt_depth.pfm";
pub const ERROR: &str = "error.json";
pub const BUNDLE_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// Render the scene, then perturb the source views.
    Synthetic {
        scene: SceneSpec,
        #[serde(default)]
        illumination: IlluminationSpec,
    },
    /// PNG frames on disk. Ground-truth depth (PFM) is optional.
    Frames {
        target: PathBuf,
        sources: Vec<PathBuf>,
        intrinsics: Intrinsics,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gt_depth: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub enabled: bool,
    /// Depth cap in millimeters applied after median scaling.
    pub cap: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            enabled: true,
            cap: DEFAULT_DEPTH_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub input: InputSpec,
    #[serde(default)]
    pub solver: SolveConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if !(self.eval.cap > 0.0) {
            return Err(Error::InvalidArgument(format!("depth cap {} must be positive", self.eval.cap)));
        }
        match &self.input {
            InputSpec::Synthetic { scene, .. } => {
                scene.validate()?;
                if scene.source_poses.len() > 2 {
                    return Err(Error::InvalidArgument("at most two source views are supported".into()));
                }
            }
            InputSpec::Frames {
                target,
                sources,
                intrinsics,
                gt_depth,
            } => {
                intrinsics.validate()?;
                if sources.is_empty() || sources.len() > 2 {
                    return Err(Error::InvalidArgument(format!(
                        "expected one or two source frames, got {}",
                        sources.len()
                    )));
                }
                for p in std::iter::once(target).chain(sources).chain(gt_depth) {
                    if !p.is_file() {
                        return Err(Error::file(p, "referenced file does not exist"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON form: serde field order, pretty-printed.
    pub fn to_canonical_json(&self) -> Result<Vec<u8>> {
        to_json_bytes(self)
    }

    /// Derives the solver seed from the experiment seed. This is the only
    /// random draw of an experiment.
    fn seeded_solver(&self) -> SolveConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        SolveConfig {
            seed: rng.next_u64(),
            ..self.solver.clone()
        }
    }
}

/// Frames and optional ground truth entering the solver.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub target: ImageBuffer,
    pub sources: Vec<ImageBuffer>,
    pub intrinsics: Intrinsics,
    pub gt: Option<GroundTruth>,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub depth: DepthMap,
    /// Present for synthetic inputs only.
    pub poses: Option<Vec<PoseSE3>>,
    /// Brightness change of each source on the target grid.
    pub brightness_change: Option<Vec<ImageBuffer>>,
    /// Target pixels whose source footprint was clamped, per source.
    pub clamped: Option<Vec<Vec<bool>>>,
}

/// Renders a scene and perturbs its source views.
pub fn synthesize(scene: &SceneSpec, illumination: &IlluminationSpec) -> Result<Inputs> {
    let r = render(scene)?;
    let mut sources = Vec::new();
    let mut change = Vec::new();
    let mut clamped = Vec::new();
    for (src, flow) in r.sources.iter().zip(&r.gt_flows) {
        let lit = apply_illumination(src, illumination);
        change.push(target_brightness_change(&lit.change, flow)?);
        clamped.push(clamped_footprint(&lit.clamped, flow));
        sources.push(lit.image);
    }
    Ok(Inputs {
        target: r.target,
        sources,
        intrinsics: scene.intrinsics,
        gt: Some(GroundTruth {
            depth: r.gt_depth,
            poses: Some(r.gt_poses),
            brightness_change: Some(change),
            clamped: Some(clamped),
        }),
    })
}

pub fn load_inputs(input: &InputSpec) -> Result<Inputs> {
    match input {
        InputSpec::Synthetic { scene, illumination } => synthesize(scene, illumination),
        InputSpec::Frames {
            target,
            sources,
            intrinsics,
            gt_depth,
        } => {
            let target = read_image(target)?;
            let sources = sources.iter().map(read_image).collect::<Result<Vec<_>>>()?;
            let gt = match gt_depth {
                Some(p) => Some(GroundTruth {
                    depth: read_pfm(p)?,
                    poses: None,
                    brightness_change: None,
                    clamped: None,
                }),
                None => None,
            };
            Ok(Inputs {
                target,
                sources,
                intrinsics: *intrinsics,
                gt,
            })
        }
    }
}

/// Writes the frames and ground truth of `inputs` into `dir`: `target.png`,
/// `source_<i>.png` (16 bit), `gt_depth.pfm`, `gt_poses.json` and
/// `gt_af_<i>.pfm` when known. Returns the written file names.
pub fn write_inputs(inputs: &Inputs, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut names = vec!["target.png".to_string()];
    write_image(dir.join("target.png"), &inputs.target, BitDepth::Sixteen)?;
    for (i, s) in inputs.sources.iter().enumerate() {
        let name = format!("source_{i}.png");
        write_image(dir.join(&name), s, BitDepth::Sixteen)?;
        names.push(name);
    }
    if let Some(gt) = &inputs.gt {
        write_pfm(dir.join(GT_DEPTH), &gt.depth)?;
        names.push(GT_DEPTH.into());
        if let Some(poses) = &gt.poses {
            write_json(dir.join("gt_poses.json"), poses)?;
            names.push("gt_poses.json".into());
        }
        for (i, c) in gt.brightness_change.iter().flatten().enumerate() {
            let name = format!("gt_af_{i}.pfm");
            write_pfm(dir.join(&name), c)?;
            names.push(name);
        }
    }
    Ok(names)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub source: usize,
    /// Degrees.
    pub translation_direction_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub depth: DepthMetrics,
    pub median_scale: f64,
    pub cap: f64,
    pub poses: Vec<PoseMetrics>,
    /// Pearson correlation of recovered and true brightness change over
    /// visible, unclamped pixels, per source. `None` when the true change
    /// has no variance there.
    pub af_correlation: Vec<Option<f64>>,
}

/// Depth metrics as stored in a bundle: both maps are rounded to `f32`
/// first, so re-evaluating the bundle's PFM files reproduces them exactly.
pub fn bundle_depth_metrics(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<(DepthMetrics, f64)> {
    evaluate_depth(&quantize_f32(pred), &quantize_f32(gt), cap)
}

/// Depth metrics from a predicted and a ground-truth PFM.
pub fn eval_files(pred: &Path, gt: &Path, cap: f64) -> Result<DepthMetrics> {
    Ok(evaluate_depth(&read_pfm(pred)?, &read_pfm(gt)?, cap)?.0)
}

pub fn compute_metrics(result: &SolveResult, gt: &GroundTruth, cap: f64) -> Result<Metrics> {
    let (depth, median_scale) = bundle_depth_metrics(&result.depth, &gt.depth, cap)?;
    let poses = match &gt.poses {
        Some(g) => result
            .state
            .poses
            .iter()
            .zip(g)
            .enumerate()
            .map(|(source, (p, g))| PoseMetrics {
                source,
                translation_direction_error: translation_direction_error(p, g),
            })
            .collect(),
        None => Vec::new(),
    };
    let mut af_correlation = Vec::new();
    if let (Some(change), Some(clamped)) = (&gt.brightness_change, &gt.clamped) {
        for (s, (c, cl)) in change.iter().zip(clamped).enumerate() {
            let mask = &result.masks()[s].visible;
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for p in 0..c.pixel_count() {
                if mask[p] && !cl[p] {
                    xs.extend_from_slice(result.af[s].pixel(p));
                    ys.extend_from_slice(c.pixel(p));
                }
            }
            af_correlation.push(pearson(&xs, &ys));
        }
    }
    Ok(Metrics {
        depth,
        median_scale,
        cap,
        poses,
        af_correlation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub solver_seed: u64,
    pub threads: usize,
    /// Stage that failed, if any.
    pub failed_stage: Option<String>,
    pub files: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Wall-clock seconds per stage.
    pub seconds: BTreeMap<String, f64>,
    pub breakdown: Option<LossBreakdown>,
    pub multiscale: Option<LossBreakdown>,
    pub gradient_energy: Option<f64>,
    pub low_texture: Option<bool>,
    pub accepted_steps: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ErrorReport {
    stage: String,
    message: String,
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct ResultBundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub metrics: Option<Metrics>,
    pub result: SolveResult,
}

/// Writes files into a bundle directory and remembers their names.
struct BundleWriter {
    dir: PathBuf,
    files: Vec<String>,
}

impl BundleWriter {
    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_bytes(self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        self.bytes(name, &to_json_bytes(value)?)
    }

    fn pfm(&mut self, name: &str, image: &ImageBuffer) -> Result<()> {
        self.bytes(name, &encode_pfm(image)?)
    }

    fn png(&mut self, name: &str, image: &ImageBuffer) -> Result<()> {
        write_image(self.dir.join(name), image, BitDepth::Eight)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn manifest(&self, cfg_bytes: &[u8], seed: u64, solver_seed: u64, failed: Option<&str>) -> Result<Manifest> {
        let mut names = self.files.clone();
        names.sort();
        names.dedup();
        let files = names
            .into_iter()
            .map(|path| {
                let full = self.dir.join(&path);
                let bytes = fs::metadata(&full).map_err(|e| Error::file(&full, e))?.len();
                Ok(ManifestEntry {
                    sha256: sha256_file(&full)?,
                    path,
                    bytes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            format: BUNDLE_FORMAT,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(cfg_bytes),
            seed,
            solver_seed,
            threads: rayon::current_num_threads(),
            failed_stage: failed.map(str::to_string),
            files,
        };
        write_json(self.dir.join(MANIFEST), &manifest)?;
        Ok(manifest)
    }
}

fn write_solution(w: &mut BundleWriter, result: &SolveResult) -> Result<()> {
    w.pfm(DEPTH, &result.depth)?;
    w.png("depth.png", &heatmap(&result.depth, None))?;
    for (i, af) in result.af.iter().enumerate() {
        w.pfm(&format!("af_{i}.pfm"), af)?;
        let m = af.data().iter().fold(1e-6f64, |m, v| m.max(v.abs()));
        w.png(&format!("af_{i}.png"), &heatmap(af, Some((-m, m))))?;
    }
    for (i, (flow, mask)) in result.flows().iter().zip(result.masks()).enumerate() {
        w.pfm(&format!("flow_{i}.pfm"), &flow_to_raster(flow))?;
        w.png(&format!("mask_{i}.png"), &mask_image(mask))?;
    }
    w.json("poses.json", &result.state.poses)?;
    let history: Vec<HistoryEntry> = result.history().cloned().collect();
    w.bytes(HISTORY, &history_csv(&history)?)?;
    w.bytes("loss_curve.svg", loss_curve_svg(&history).as_bytes())
}

/// Runs synthesis (for synthetic inputs), the solver and evaluation, and
/// writes the bundle into `cfg.output`. A failing stage still leaves
/// `error.json`, `diagnostics.json` and a manifest of what was written, and
/// the returned error names the stage.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultBundle> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let dir = cfg.output.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e).in_stage("output"))?;
    let solver = cfg.seeded_solver();
    let cfg_bytes = cfg.to_canonical_json()?;
    let mut w = BundleWriter {
        dir: dir.clone(),
        files: Vec::new(),
    };
    w.bytes(CONFIG, &cfg_bytes).map_err(|e| e.in_stage("output"))?;
    let mut diag = Diagnostics::default();
    let outcome = run_stages(cfg, &solver, &mut w, &mut diag);
    w.json("diagnostics.json", &diag)?;
    match outcome {
        Ok((result, metrics)) => {
            let manifest = w.manifest(&cfg_bytes, cfg.seed, solver.seed, None)?;
            Ok(ResultBundle {
                dir,
                manifest,
                metrics,
                result,
            })
        }
        Err(e) => {
            let stage = e.stage().unwrap_or("unknown");
            w.json(
                ERROR,
                &ErrorReport {
                    stage: stage.into(),
                    message: e.to_string(),
                },
            )?;
            w.manifest(&cfg_bytes, cfg.seed, solver.seed, Some(stage))?;
            Err(e)
        }
    }
}

fn run_stages(
    cfg: &ExperimentConfig,
    solver: &SolveConfig,
    w: &mut BundleWriter,
    diag: &mut Diagnostics,
) -> Result<(SolveResult, Option<Metrics>)> {
    let t = Instant::now();
    let stage = match cfg.input {
        InputSpec::Synthetic { .. } => "synth",
        InputSpec::Frames { .. } => "load",
    };
    let inputs = load_inputs(&cfg.input).map_err(|e| e.in_stage(stage))?;
    for name in write_inputs(&inputs, &w.dir).map_err(|e| e.in_stage(stage))? {
        w.files.push(name);
    }
    diag.seconds.insert(stage.into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let result = solve(&inputs.target, &inputs.sources, &inputs.intrinsics, solver).map_err(|e| match e {
        Error::Stage { .. } => e,
        e => e.in_stage("solve"),
    })?;
    diag.seconds.insert("solve".into(), t.elapsed().as_secs_f64());
    diag.breakdown = Some(result.breakdown);
    diag.multiscale = Some(result.multiscale);
    diag.gradient_energy = Some(result.gradient_energy);
    diag.low_texture = Some(result.low_texture);
    diag.accepted_steps = Some(result.history().count());
    write_solution(w, &result).map_err(|e| e.in_stage("output"))?;

    let metrics = match (&inputs.gt, cfg.eval.enabled) {
        (Some(gt), true) => {
            let t = Instant::now();
            let m = compute_metrics(&result, gt, cfg.eval.cap).map_err(|e| e.in_stage("eval"))?;
            w.json(METRICS, &m).map_err(|e| e.in_stage("output"))?;
            diag.seconds.insert("eval".into(), t.elapsed().as_secs_f64());
            Some(m)
        }
        _ => None,
    };
    Ok((result, metrics))
}

/// Recomputes every manifest hash; returns the entries that no longer match.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let manifest: Manifest = read_json(dir.join(MANIFEST))?;
    let mut bad = Vec::new();
    for entry in &manifest.files {
        let path = dir.join(&entry.path);
        if !path.is_file() || sha256_file(&path)? != entry.sha256 {
            bad.push(entry.path.clone());
        }
    }
    Ok(bad)
}

/// One row of a report: final loss and metrics of one bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub bundle: String,
    pub accepted_steps: usize,
    pub final_total: Option<f64>,
    pub final_data_fidelity: Option<f64>,
    pub abs_rel: Option<f64>,
    pub sq_rel: Option<f64>,
    pub rmse: Option<f64>,
    pub rmse_log: Option<f64>,
    pub delta: Option<f64>,
}

/// Reads `history.csv` and, when present, `metrics.json` of each bundle.
/// Bundles are read in parallel; rows keep the input order.
pub fn report(bundles: &[PathBuf]) -> Result<Vec<ReportRow>> {
    use rayon::prelude::*;
    bundles
        .par_iter()
        .map(|dir| {
            let history = crate::io::read_history_csv(dir.join(HISTORY))?;
            let last = history.last();
            let metrics_path = dir.join(METRICS);
            let metrics: Option<Metrics> = if metrics_path.is_file() {
                Some(read_json(&metrics_path)?)
            } else {
                None
            };
            let d = metrics.map(|m| m.depth);
            Ok(ReportRow {
                bundle: dir.display().to_string(),
                accepted_steps: history.len(),
                final_total: last.map(|e| e.total),
                final_data_fidelity: last.map(|e| e.data_fidelity),
                abs_rel: d.map(|d| d.abs_rel),
                sq_rel: d.map(|d| d.sq_rel),
                rmse: d.map(|d| d.rmse),
                rmse_log: d.map(|d| d.rmse_log),
                delta: d.map(|d| d.delta),
            })
        })
        .collect()
}

pub fn report_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Fixed-width text table of the report.
pub fn report_table(rows: &[ReportRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let header = ["bundle", "steps", "total", "data", "abs_rel", "sq_rel", "rmse", "rmse_log", "delta"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        cells.push(vec![
            r.bundle.clone(),
            r.accepted_steps.to_string(),
            fmt(r.final_total),
            fmt(r.final_data_fidelity),
            fmt(r.abs_rel),
            fmt(r.sq_rel),
            fmt(r.rmse),
            fmt(r.rmse_log),
            fmt(r.delta),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
