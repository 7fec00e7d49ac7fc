//! Coarse-to-fine direct optimization of per-pixel parameter fields.
//!
//! Stage 1 estimates optical flow in both directions between the target and
//! each source and derives visibility masks from the range map of the
//! backward flow. Stage 2 freezes flows and masks and jointly descends on
//! log-depth, poses and appearance-flow latents. Both stages run on a dyadic
//! image pyramid, coarsest level first, and each level is initialized from the
//! upsampled solution of the level below it.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rigid_flow_jacobians, FlowField2D, Intrinsics, PoseSE3};
use crate::image::{DepthMap, ImageBuffer};
use crate::losses::{
    auxiliary_loss, field_smoothness, multiscale_total_loss, total_loss, LossBreakdown, Objective,
    StructureGradients, StructureParams,
};
use crate::photometric::LossWeights;
use crate::pyramid::{build_pyramid, downsample, downsample_flow, upsample, upsample_flow};
use crate::warping::{range_map, visibility_mask, RangeMap, VisibilityMask, VISIBILITY_THRESHOLD};

const ARMIJO: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub weights: LossWeights,
    /// Edge-aware smoothness weight on optical flow during stage 1.
    pub flow_smoothness: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Initial trial steps. Field blocks move by at most this much per pixel
    /// (log-depth, latent or pixel units); the pose step is the RMS flow
    /// change in pixels. Steps double after an immediately accepted trial and
    /// halve while backtracking.
    pub step_depth: f64,
    pub step_pose: f64,
    pub step_af: f64,
    pub step_flow: f64,
    /// Relative loss change below which an iteration counts as stalled.
    pub tolerance: f64,
    /// Consecutive stalled iterations that end a level.
    pub patience: usize,
    pub max_backtracks: usize,
    /// Length in pixels of the smoothing applied to field gradients before
    /// stepping; zero gives plain gradient descent.
    pub gradient_smoothing: f64,
    pub levels: usize,
    pub mask_threshold: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// When false the appearance flow stays pinned at zero.
    pub appearance_flow: bool,
    /// Hold the appearance flow fixed on each level until depth and pose
    /// stall, then release it. Offsets released from the start can soak up
    /// parallax before the pose has settled, which on near-planar scenes
    /// lets a rotation stand in for the lateral translation.
    pub geometry_first: bool,
    /// Gradient energy below which the target is reported as low-texture.
    pub low_texture_threshold: f64,
    /// Recorded with the results. The solver itself draws no random numbers,
    /// so equal inputs give bit-identical outputs for any seed.
    pub seed: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            flow_smoothness: 0.05,
            stage1_iters: 200,
            stage2_iters: 200,
            step_depth: 0.1,
            step_pose: 1e-3,
            step_af: 0.1,
            step_flow: 1.0,
            tolerance: 1e-6,
            patience: 5,
            max_backtracks: 30,
            gradient_smoothing: 5.0,
            levels: 4,
            mask_threshold: VISIBILITY_THRESHOLD,
            depth_min: 1.0,
            depth_max: 300.0,
            appearance_flow: true,
            geometry_first: true,
            low_texture_threshold: 1e-6,
            seed: 0,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let steps = [self.step_depth, self.step_pose, self.step_af, self.step_flow];
        if steps.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("step sizes must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        if self.levels == 0 {
            return Err(Error::InvalidArgument("at least one pyramid level is required".into()));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return Err(Error::InvalidArgument("depth range must satisfy 0 < min < max".into()));
        }
        if !(self.flow_smoothness >= 0.0) {
            return Err(Error::InvalidArgument("flow smoothness must be non-negative".into()));
        }
        Ok(())
    }

    fn log_depth_range(&self) -> (f64, f64) {
        (self.depth_min.ln(), self.depth_max.ln())
    }
}

/// One accepted iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub stage: u8,
    pub level: usize,
    /// Optimized block: `forward/<s>` or `backward/<s>` in stage 1, `joint`
    /// in stage 2.
    pub block: String,
    pub iteration: usize,
    pub total: f64,
    pub data_fidelity: f64,
    pub l_rs: f64,
    pub l_ax: f64,
    pub l_es: f64,
}

/// Optimized parameter blocks at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveState {
    pub log_depth: ImageBuffer,
    pub poses: Vec<PoseSE3>,
    pub af_latent: Vec<ImageBuffer>,
}

impl SolveState {
    /// Constant depth at the geometric mean of the admissible range, identity
    /// poses, zero appearance flow.
    pub fn initial(width: usize, height: usize, channels: usize, sources: usize, cfg: &SolveConfig) -> Self {
        Self {
            log_depth: ImageBuffer::filled(width, height, 1, (cfg.depth_min * cfg.depth_max).sqrt().ln()),
            poses: vec![PoseSE3::identity(); sources],
            af_latent: vec![ImageBuffer::new(width, height, channels); sources],
        }
    }

    pub fn depth(&self) -> DepthMap {
        self.log_depth.map(f64::exp)
    }

    pub fn af(&self) -> Vec<ImageBuffer> {
        self.af_latent.iter().map(|l| l.map(f64::tanh)).collect()
    }

    pub fn params(&self) -> StructureParams {
        StructureParams {
            depth: self.depth(),
            poses: self.poses.clone(),
            af: self.af(),
        }
    }

    fn is_finite(&self) -> bool {
        self.log_depth.is_finite()
            && self.poses.iter().all(|p| p.is_finite())
            && self.af_latent.iter().all(|a| a.is_finite())
    }
}

/// Stage-1 products at one pyramid level, one entry per source.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowLevel {
    /// Target grid, pointing into the source.
    pub forward: Vec<FlowField2D>,
    /// Source grid, pointing into the target.
    pub backward: Vec<FlowField2D>,
    /// Range map of the backward flow on the target grid.
    pub range_maps: Vec<RangeMap>,
    /// Target-grid visibility.
    pub masks: Vec<VisibilityMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Result {
    /// Index 0 is full resolution.
    pub levels: Vec<FlowLevel>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Result {
    /// Final state per level, index 0 is full resolution.
    pub levels: Vec<SolveState>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub state: SolveState,
    /// Depth in millimeters.
    pub depth: DepthMap,
    /// Brightness offsets `C_δ` per source.
    pub af: Vec<ImageBuffer>,
    pub stage1: Stage1Result,
    pub stage2: Stage2Result,
    /// Full-resolution objective of the final state.
    pub breakdown: LossBreakdown,
    /// Objective averaged over the per-level solutions upsampled to full
    /// resolution.
    pub multiscale: LossBreakdown,
    /// Mean squared forward-difference gradient of the target.
    pub gradient_energy: f64,
    pub low_texture: bool,
}

impl SolveResult {
    pub fn flows(&self) -> &[FlowField2D] {
        &self.stage1.levels[0].forward
    }

    pub fn masks(&self) -> &[VisibilityMask] {
        &self.stage1.levels[0].masks
    }

    pub fn history(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.stage1.history.iter().chain(&self.stage2.history)
    }
}

fn check_frames(target: &ImageBuffer, sources: &[ImageBuffer]) -> Result<()> {
    if sources.is_empty() || sources.len() > 2 {
        return Err(Error::InvalidArgument(format!(
            "expected one or two source views, got {}",
            sources.len()
        )));
    }
    for s in sources {
        target.ensure_same_shape(s, "source view")?;
    }
    Ok(())
}

fn divergence(stage: &'static str, level: usize, detail: impl Into<String>) -> Error {
    Error::Divergence {
        stage,
        level,
        detail: detail.into(),
    }
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Adaptive trial step of a low-dimensional block whose direction is
/// already normalized.
#[derive(Clone, Copy, Debug)]
struct Step {
    trial: f64,
}

/// Separable first-order recursive smoothing `AᵀA` along each axis, where `A`
/// is the causal filter `y_i = (1 − a) x_i + a y_{i−1}` with zero initial
/// state. The operator is symmetric positive semi-definite, so `−B g` is a
/// descent direction whenever `B g ≠ 0`; it moves neighboring coordinates
/// together at a cost independent of the smoothing length.
#[derive(Clone, Copy, Debug)]
struct Smoother {
    width: usize,
    height: usize,
    channels: usize,
    /// Decay length in pixels; zero disables smoothing.
    length: f64,
}

impl Smoother {
    fn pass(line: &mut [f64], stride: usize, count: usize, a: f64) {
        let b = 1.0 - a;
        let mut acc = 0.0;
        for i in 0..count {
            acc = b * line[i * stride] + a * acc;
            line[i * stride] = acc;
        }
        acc = 0.0;
        for i in (0..count).rev() {
            acc = b * line[i * stride] + a * acc;
            line[i * stride] = acc;
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        if !(self.length > 0.0) {
            return out;
        }
        let (w, h, c) = (self.width, self.height, self.channels);
        let a = (-1.0 / self.length).exp();
        for chunk in out.chunks_exact_mut(w * h * c) {
            for y in 0..h {
                for ch in 0..c {
                    Self::pass(&mut chunk[y * w * c + ch..], c, w, a);
                }
            }
            for x in 0..w {
                for ch in 0..c {
                    Self::pass(&mut chunk[x * c + ch..], w * c, h, a);
                }
            }
        }
        out
    }
}

/// Step-length memory of a field block moving along the smoothed negative
/// gradient `−B g`. The first trial displaces the largest coordinate by
/// `base`; later trials use a spectral (Barzilai-Borwein) length fitted to the
/// last accepted move, limited to ten times that displacement.
struct SpectralStep {
    base: f64,
    smoother: Smoother,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    last: Option<f64>,
}

impl SpectralStep {
    fn new(base: f64, smoother: Smoother) -> Self {
        Self {
            base,
            smoother,
            prev: None,
            last: None,
        }
    }

    fn precondition(&self, g: &[f64]) -> Vec<f64> {
        self.smoother.apply(g)
    }

    fn trial(&self, x: &[f64], g: &[f64], bg: &[f64]) -> f64 {
        let first = self.base / max_abs(bg.iter().copied());
        let spectral = self.prev.as_ref().and_then(|(px, pg)| {
            let y: Vec<f64> = g.iter().zip(pg).map(|(a, b)| a - b).collect();
            let by = self.smoother.apply(&y);
            let (mut sby, mut byby) = (0.0, 0.0);
            for i in 0..x.len() {
                sby += (x[i] - px[i]) * by[i];
                byby += by[i] * by[i];
            }
            (sby > 0.0 && byby > 0.0).then(|| sby / byby)
        });
        let a = spectral.or(self.last.map(|l| 2.0 * l)).unwrap_or(first);
        a.min(10.0 * first)
    }

    fn accept(&mut self, x: Vec<f64>, g: Vec<f64>, a: f64) {
        self.prev = Some((x, g));
        self.last = Some(a);
    }

    fn reset(&mut self) {
        self.prev = None;
        self.last = None;
    }
}

/// Armijo backtracking by halving from `trial`. `eval(a)` returns the loss at
/// step length `a`; `slope` is the directional derivative at `a = 0`.
/// Returns the accepted step and its loss, or `None` when no trial decreased
/// the loss enough.
fn backtrack(
    trial: f64,
    f0: f64,
    slope: f64,
    max_backtracks: usize,
    mut eval: impl FnMut(f64) -> Result<f64>,
) -> Result<Option<(f64, f64, usize)>> {
    if !(slope < 0.0) || !(trial > 0.0) || !trial.is_finite() {
        return Ok(None);
    }
    let mut a = trial;
    for attempt in 0..=max_backtracks {
        let f = eval(a)?;
        if f.is_finite() && f <= f0 + ARMIJO * a * slope {
            return Ok(Some((a, f, attempt)));
        }
        a *= 0.5;
    }
    Ok(None)
}

struct Stall {
    count: usize,
}

impl Stall {
    /// Records one iteration; true when the level should stop.
    fn update(&mut self, before: f64, after: f64, cfg: &SolveConfig, moved: bool) -> bool {
        let rel = (before - after).abs() / before.abs().max(f64::MIN_POSITIVE);
        if !moved || rel < cfg.tolerance {
            self.count += 1;
        } else {
            self.count = 0;
        }
        self.count >= cfg.patience.max(1)
    }
}

// ---------------------------------------------------------------------------
// Stage 1

struct FlowProblem<'a> {
    reference: &'a ImageBuffer,
    other: &'a ImageBuffer,
    mask: &'a VisibilityMask,
    alpha: f64,
    smoothness: f64,
}

impl FlowProblem<'_> {
    fn zero_af(&self) -> ImageBuffer {
        ImageBuffer::new(self.reference.width(), self.reference.height(), self.reference.channels())
    }

    /// Returns (data, smoothness, gradient).
    fn eval(&self, flow: &FlowField2D, want_grad: bool) -> Result<(f64, f64, Option<Vec<[f64; 2]>>)> {
        let aux = auxiliary_loss(
            self.reference,
            std::slice::from_ref(self.other),
            std::slice::from_ref(flow),
            &[self.zero_af()],
            std::slice::from_ref(self.mask),
            self.alpha,
        )?;
        let (smooth, g_smooth) = field_smoothness(&flow.to_image(), self.reference)?;
        let grad = want_grad.then(|| {
            aux.grad_flows[0]
                .iter()
                .zip(g_smooth.data().chunks_exact(2))
                .map(|(g, s)| [g[0] + self.smoothness * s[0], g[1] + self.smoothness * s[1]])
                .collect()
        });
        Ok((aux.value, smooth, grad))
    }

    fn total(&self, data: f64, smooth: f64) -> f64 {
        data + self.smoothness * smooth
    }
}

fn optimize_flow(
    problem: &FlowProblem<'_>,
    mut flow: FlowField2D,
    cfg: &SolveConfig,
    level: usize,
    block: String,
    history: &mut Vec<HistoryEntry>,
) -> Result<FlowField2D> {
    let smoother = Smoother {
        width: flow.width,
        height: flow.height,
        channels: 2,
        length: cfg.gradient_smoothing,
    };
    let mut step = SpectralStep::new(cfg.step_flow, smoother);
    let mut stall = Stall { count: 0 };
    for iteration in 0..cfg.stage1_iters {
        let (data, smooth, grad) = problem.eval(&flow, true)?;
        let f0 = problem.total(data, smooth);
        let g: Vec<f64> = grad.expect("requested").iter().flat_map(|g| [g[0], g[1]]).collect();
        if !f0.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(divergence("stage1", level, format!("{block}: non-finite loss or gradient")));
        }
        if max_abs(g.iter().copied()) == 0.0 {
            break;
        }
        let x: Vec<f64> = flow.vectors.iter().flat_map(|v| [v[0], v[1]]).collect();
        let bg = step.precondition(&g);
        let slope = -g.iter().zip(&bg).map(|(a, b)| a * b).sum::<f64>();
        let candidate = |a: f64| {
            let mut f = flow.clone();
            for (v, gv) in f.vectors.iter_mut().zip(bg.chunks_exact(2)) {
                v[0] -= a * gv[0];
                v[1] -= a * gv[1];
            }
            f
        };
        let mut parts = (data, smooth);
        let accepted = backtrack(step.trial(&x, &g, &bg), f0, slope, cfg.max_backtracks, |a| {
            let (d, s, _) = problem.eval(&candidate(a), false)?;
            parts = (d, s);
            Ok(problem.total(d, s))
        })?;
        let Some((a, f1, _)) = accepted else {
            step.reset();
            if stall.update(f0, f0, cfg, false) {
                break;
            }
            continue;
        };
        flow = candidate(a);
        step.accept(x, g, a);
        history.push(HistoryEntry {
            stage: 1,
            level,
            block: block.clone(),
            iteration,
            total: f1,
            data_fidelity: parts.0,
            l_rs: 0.0,
            l_ax: 0.0,
            l_es: parts.1,
        });
        if stall.update(f0, f1, cfg, true) {
            break;
        }
    }
    Ok(flow)
}

fn mask_from_flow(flow: &FlowField2D, threshold: f64) -> VisibilityMask {
    visibility_mask(&range_map(flow), threshold)
}

fn ensure_visible(mask: &VisibilityMask, level: usize, what: &str) -> Result<()> {
    if mask.count() == 0 {
        return Err(Error::DegenerateVisibility(format!("{what} at level {level}")));
    }
    Ok(())
}

/// Optical flow between the target and every source, with range maps and
/// visibility masks, at every pyramid level.
pub fn solve_stage1_flow(target: &ImageBuffer, sources: &[ImageBuffer], cfg: &SolveConfig) -> Result<Stage1Result> {
    cfg.validate()?;
    check_frames(target, sources)?;
    let t_pyr = build_pyramid(target, cfg.levels)?;
    let s_pyr = sources
        .iter()
        .map(|s| build_pyramid(s, cfg.levels))
        .collect::<Result<Vec<_>>>()?;
    let mut history = Vec::new();
    let mut levels: Vec<Option<FlowLevel>> = vec![None; cfg.levels];
    let mut prev: Option<(Vec<FlowField2D>, Vec<FlowField2D>)> = None;
    for level in (0..cfg.levels).rev() {
        let tl = &t_pyr[level];
        let (w, h) = (tl.width(), tl.height());
        let mut forward = Vec::new();
        let mut backward = Vec::new();
        for (s, sp) in s_pyr.iter().enumerate() {
            let sl = &sp[level];
            let (f_init, b_init) = match &prev {
                Some((f, b)) => (upsample_flow(&f[s], w, h, 2.0)?, upsample_flow(&b[s], w, h, 2.0)?),
                None => (FlowField2D::zeros(w, h), FlowField2D::zeros(w, h)),
            };
            // Source-grid visibility comes from the forward flow's range map.
            let source_mask = if prev.is_some() {
                mask_from_flow(&f_init, cfg.mask_threshold)
            } else {
                VisibilityMask::all_visible(w, h)
            };
            ensure_visible(&source_mask, level, "source-grid mask")?;
            let b = optimize_flow(
                &FlowProblem {
                    reference: sl,
                    other: tl,
                    mask: &source_mask,
                    alpha: cfg.weights.alpha,
                    smoothness: cfg.flow_smoothness,
                },
                b_init,
                cfg,
                level,
                format!("backward/{s}"),
                &mut history,
            )?;
            let target_mask = mask_from_flow(&b, cfg.mask_threshold);
            ensure_visible(&target_mask, level, "target-grid mask")?;
            let f = optimize_flow(
                &FlowProblem {
                    reference: tl,
                    other: sl,
                    mask: &target_mask,
                    alpha: cfg.weights.alpha,
                    smoothness: cfg.flow_smoothness,
                },
                f_init,
                cfg,
                level,
                format!("forward/{s}"),
                &mut history,
            )?;
            forward.push(f);
            backward.push(b);
        }
        let range_maps: Vec<RangeMap> = backward.iter().map(range_map).collect();
        let masks = range_maps
            .iter()
            .map(|r| visibility_mask(r, cfg.mask_threshold))
            .collect();
        levels[level] = Some(FlowLevel {
            forward: forward.clone(),
            backward: backward.clone(),
            range_maps,
            masks,
        });
        prev = Some((forward, backward));
    }
    Ok(Stage1Result {
        levels: levels.into_iter().map(|l| l.expect("every level solved")).collect(),
        history,
    })
}

// ---------------------------------------------------------------------------
// Stage 2

struct JointProblem<'a> {
    objective: Objective<'a>,
    cfg: &'a SolveConfig,
}

impl JointProblem<'_> {
    fn eval(&self, state: &SolveState, want_grad: bool) -> Result<(LossBreakdown, Option<StructureGradients>)> {
        total_loss(&self.objective, &state.params(), want_grad)
    }

    fn value(&self, state: &SolveState) -> Result<f64> {
        Ok(self.eval(state, false)?.0.total)
    }
}

/// Steepest-descent direction for one pose under the metric induced by the
/// mean squared rigid-flow change, `M = mean_p J_pᵀ J_p`, lightly damped.
/// Normalized to unit RMS flow change.
fn pose_direction(depth: &DepthMap, pose: &PoseSE3, k: &Intrinsics, grad: &[f64; 6]) -> Result<[f64; 6]> {
    let jac = rigid_flow_jacobians(depth, pose, k)?;
    let mut m = SMatrix::<f64, 6, 6>::zeros();
    let mut n = 0usize;
    for j in jac.iter().flatten() {
        for row in &j.pose {
            let r = SVector::<f64, 6>::from_row_slice(row);
            m += r * r.transpose();
        }
        n += 1;
    }
    let g = SVector::<f64, 6>::from_row_slice(grad);
    if n == 0 {
        return Ok([0.0; 6]);
    }
    m /= n as f64;
    let damping = 1e-6 * m.trace() / 6.0;
    for i in 0..6 {
        m[(i, i)] += damping.max(f64::MIN_POSITIVE);
    }
    let Some(chol) = m.cholesky() else {
        return Ok([0.0; 6]);
    };
    let d = -chol.solve(&g);
    let rms = (d.transpose() * m * d)[(0, 0)].sqrt();
    if !(rms > 0.0 && rms.is_finite()) {
        return Ok([0.0; 6]);
    }
    let d = d / rms;
    Ok([d[0], d[1], d[2], d[3], d[4], d[5]])
}

enum Block {
    Depth,
    Pose,
    Af,
}

struct JointSteps {
    depth: SpectralStep,
    pose: Step,
    af: SpectralStep,
}

fn flatten(images: &[ImageBuffer]) -> Vec<f64> {
    images.iter().flat_map(|i| i.data().iter().copied()).collect()
}

/// One line-searched step on a single block. Returns the loss before the step
/// and, when a step was accepted, the loss after it.
fn block_step(
    problem: &JointProblem<'_>,
    state: &mut SolveState,
    block: Block,
    steps: &mut JointSteps,
    level: usize,
) -> Result<(f64, Option<f64>)> {
    let cfg = problem.cfg;
    let (b, g) = problem.eval(state, true)?;
    let g = g.expect("requested");
    let f0 = b.total;
    if !f0.is_finite() {
        return Err(divergence("stage2", level, "non-finite loss"));
    }
    let k = problem.objective.intrinsics;
    let accepted = match block {
        Block::Depth => {
            let (lo, hi) = cfg.log_depth_range();
            // Coordinates pinned at a bound with the gradient pushing outward
            // are excluded from the direction.
            let gd: Vec<f64> = g
                .log_depth
                .data()
                .iter()
                .zip(state.log_depth.data())
                .map(|(&g, &x)| if (x <= lo && g > 0.0) || (x >= hi && g < 0.0) { 0.0 } else { g })
                .collect();
            if gd.iter().any(|v| !v.is_finite()) {
                return Err(divergence("stage2", level, "non-finite depth gradient"));
            }
            if max_abs(gd.iter().copied()) == 0.0 {
                return Ok((f0, None));
            }
            let x = state.log_depth.data().to_vec();
            let bg = steps.depth.precondition(&gd);
            let slope = -gd.iter().zip(&bg).map(|(a, b)| a * b).sum::<f64>();
            let candidate = |a: f64| {
                let mut s = state.clone();
                for (x, g) in s.log_depth.data_mut().iter_mut().zip(&bg) {
                    *x = (*x - a * g).clamp(lo, hi);
                }
                s
            };
            let r = backtrack(steps.depth.trial(&x, &gd, &bg), f0, slope, cfg.max_backtracks, |a| {
                problem.value(&candidate(a))
            })?;
            match r {
                Some((a, f, _)) => {
                    let next = candidate(a);
                    steps.depth.accept(x, gd, a);
                    Some((next, f))
                }
                None => {
                    steps.depth.reset();
                    None
                }
            }
        }
        Block::Pose => {
            let depth = state.depth();
            let dirs = g
                .poses
                .iter()
                .zip(&state.poses)
                .map(|(gp, p)| pose_direction(&depth, p, &k, gp))
                .collect::<Result<Vec<_>>>()?;
            let slope: f64 = g
                .poses
                .iter()
                .zip(&dirs)
                .map(|(gp, d)| gp.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            if !slope.is_finite() {
                return Err(divergence("stage2", level, "non-finite pose gradient"));
            }
            let candidate = |a: f64| {
                let mut s = state.clone();
                for (p, d) in s.poses.iter_mut().zip(&dirs) {
                    let mut v = p.to_vector();
                    for i in 0..6 {
                        v[i] += a * d[i];
                    }
                    *p = PoseSE3::from_vector(v);
                }
                s
            };
            let r = backtrack(steps.pose.trial, f0, slope, cfg.max_backtracks, |a| {
                problem.value(&candidate(a))
            })?;
            match r {
                Some((a, f, attempt)) => {
                    steps.pose.trial = if attempt == 0 { 2.0 * a } else { a };
                    Some((candidate(a), f))
                }
                None => {
                    steps.pose.trial = cfg.step_pose;
                    None
                }
            }
        }
        Block::Af => {
            let gl: Vec<ImageBuffer> = g
                .af
                .iter()
                .zip(&state.af_latent)
                .map(|(ga, l)| ga.zip_map(l, |g, x| g * (1.0 - x.tanh().powi(2))))
                .collect::<Result<_>>()?;
            let gv = flatten(&gl);
            if gv.iter().any(|v| !v.is_finite()) {
                return Err(divergence("stage2", level, "non-finite appearance-flow gradient"));
            }
            if max_abs(gv.iter().copied()) == 0.0 {
                return Ok((f0, None));
            }
            let x = flatten(&state.af_latent);
            let bg = steps.af.precondition(&gv);
            let slope = -gv.iter().zip(&bg).map(|(a, b)| a * b).sum::<f64>();
            let candidate = |a: f64| {
                let mut s = state.clone();
                for (x, g) in s.af_latent.iter_mut().flat_map(|l| l.data_mut().iter_mut()).zip(&bg) {
                    *x -= a * g;
                }
                s
            };
            let r = backtrack(steps.af.trial(&x, &gv, &bg), f0, slope, cfg.max_backtracks, |a| {
                problem.value(&candidate(a))
            })?;
            match r {
                Some((a, f, _)) => {
                    let next = candidate(a);
                    steps.af.accept(x, gv, a);
                    Some((next, f))
                }
                None => {
                    steps.af.reset();
                    None
                }
            }
        }
    };
    Ok((
        f0,
        accepted.map(|(next, f)| {
            *state = next;
            f
        }),
    ))
}

fn optimize_joint(
    problem: &JointProblem<'_>,
    mut state: SolveState,
    level: usize,
    history: &mut Vec<HistoryEntry>,
) -> Result<SolveState> {
    let cfg = problem.cfg;
    let smoother = |channels| Smoother {
        width: state.log_depth.width(),
        height: state.log_depth.height(),
        channels,
        length: cfg.gradient_smoothing,
    };
    let mut steps = JointSteps {
        depth: SpectralStep::new(cfg.step_depth, smoother(1)),
        pose: Step { trial: cfg.step_pose },
        af: SpectralStep::new(cfg.step_af, smoother(state.af_latent[0].channels())),
    };
    let mut stall = Stall { count: 0 };
    let mut af_free = !cfg.geometry_first;
    for iteration in 0..cfg.stage2_iters {
        let mut blocks = vec![Block::Depth, Block::Pose];
        if cfg.appearance_flow && af_free {
            blocks.push(Block::Af);
        }
        let mut before = None;
        let mut after = f64::NAN;
        let mut moved = false;
        for block in blocks {
            let (f0, accepted) = block_step(problem, &mut state, block, &mut steps, level)?;
            before.get_or_insert(f0);
            moved |= accepted.is_some();
            after = accepted.unwrap_or(f0);
        }
        if !state.is_finite() {
            return Err(divergence("stage2", level, "non-finite parameters"));
        }
        if moved {
            let (b, _) = problem.eval(&state, false)?;
            history.push(HistoryEntry {
                stage: 2,
                level,
                block: "joint".into(),
                iteration,
                total: b.total,
                data_fidelity: b.data_fidelity,
                l_rs: b.l_rs,
                l_ax: b.l_ax,
                l_es: b.l_es,
            });
        }
        if stall.update(before.expect("at least one block"), after, cfg, moved) {
            if cfg.appearance_flow && !af_free {
                af_free = true;
                stall = Stall { count: 0 };
                continue;
            }
            break;
        }
    }
    Ok(state)
}

fn upsample_state(state: &SolveState, width: usize, height: usize) -> Result<SolveState> {
    // Depth is upsampled in millimeters, then taken back to log space.
    let depth = upsample(&state.depth(), width, height, 2.0)?;
    Ok(SolveState {
        log_depth: depth.map(f64::ln),
        poses: state.poses.clone(),
        af_latent: state
            .af_latent
            .iter()
            .map(|a| upsample(a, width, height, 2.0))
            .collect::<Result<_>>()?,
    })
}

/// Joint descent on depth, poses and appearance flow with stage-1 flows and
/// masks frozen. Starts from [`SolveState::initial`] at the coarsest level.
pub fn solve_stage2_joint(
    target: &ImageBuffer,
    sources: &[ImageBuffer],
    k: &Intrinsics,
    stage1: &Stage1Result,
    cfg: &SolveConfig,
) -> Result<Stage2Result> {
    cfg.validate()?;
    check_frames(target, sources)?;
    if stage1.levels.len() != cfg.levels {
        return Err(Error::InvalidArgument(format!(
            "stage-1 result has {} levels, configuration asks for {}",
            stage1.levels.len(),
            cfg.levels
        )));
    }
    if k.width != target.width() || k.height != target.height() {
        return Err(Error::Shape("intrinsics do not match the frames".into()));
    }
    let t_pyr = build_pyramid(target, cfg.levels)?;
    let s_pyr = sources
        .iter()
        .map(|s| build_pyramid(s, cfg.levels))
        .collect::<Result<Vec<_>>>()?;
    let mut history = Vec::new();
    let mut states: Vec<Option<SolveState>> = vec![None; cfg.levels];
    let mut prev: Option<SolveState> = None;
    for level in (0..cfg.levels).rev() {
        let tl = &t_pyr[level];
        let (w, h) = (tl.width(), tl.height());
        let kl = k.at_level(level);
        let sl: Vec<ImageBuffer> = s_pyr.iter().map(|p| p[level].clone()).collect();
        let flows = &stage1.levels[level];
        for (s, m) in flows.masks.iter().enumerate() {
            ensure_visible(m, level, &format!("mask of source {s}"))?;
        }
        let init = match &prev {
            Some(p) => upsample_state(p, w, h)?,
            None => SolveState::initial(w, h, tl.channels(), sources.len(), cfg),
        };
        let problem = JointProblem {
            objective: Objective {
                target: tl,
                sources: &sl,
                intrinsics: kl,
                flows: &flows.forward,
                masks: &flows.masks,
                weights: cfg.weights,
            },
            cfg,
        };
        let state = optimize_joint(&problem, init, level, &mut history)?;
        prev = Some(state.clone());
        states[level] = Some(state);
    }
    Ok(Stage2Result {
        levels: states.into_iter().map(|s| s.expect("every level solved")).collect(),
        history,
    })
}

/// Mean squared forward difference of the channel-averaged image.
pub fn gradient_energy(image: &ImageBuffer) -> f64 {
    let g = image.channel_mean();
    let (w, h) = (g.width(), g.height());
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                sum += (g.get(x + 1, y, 0) - g.get(x, y, 0)).powi(2);
                n += 1;
            }
            if y + 1 < h {
                sum += (g.get(x, y + 1, 0) - g.get(x, y, 0)).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Stage 1 followed by stage 2 on a target and one or two source views.
pub fn solve(target: &ImageBuffer, sources: &[ImageBuffer], k: &Intrinsics, cfg: &SolveConfig) -> Result<SolveResult> {
    cfg.validate()?;
    check_frames(target, sources)?;
    let stage1 = solve_stage1_flow(target, sources, cfg).map_err(|e| e.in_stage("stage1"))?;
    let stage2 = solve_stage2_joint(target, sources, k, &stage1, cfg).map_err(|e| e.in_stage("stage2"))?;
    let state = stage2.levels[0].clone();
    let top = &stage1.levels[0];
    let objective = Objective {
        target,
        sources,
        intrinsics: *k,
        flows: &top.forward,
        masks: &top.masks,
        weights: cfg.weights,
    };
    let (breakdown, _) = total_loss(&objective, &state.params(), false)?;
    let scales: Vec<StructureParams> = stage2.levels.iter().map(|s| s.params()).collect();
    let (multiscale, _) = multiscale_total_loss(&objective, &scales, false)?;
    let energy = gradient_energy(target);
    Ok(SolveResult {
        depth: state.depth(),
        af: state.af(),
        state,
        stage1,
        stage2,
        breakdown,
        multiscale,
        gradient_energy: energy,
        low_texture: energy < cfg.low_texture_threshold,
    })
}

/// Downsamples a full-resolution flow to every pyramid level.
pub fn flow_pyramid(flow: &FlowField2D, levels: usize) -> Result<Vec<FlowField2D>> {
    let mut out = vec![flow.clone()];
    for _ in 1..levels {
        let next = downsample_flow(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

/// Depth pyramid by 2x2 averaging, used to compare per-level solutions.
pub fn depth_pyramid(depth: &DepthMap, levels: usize) -> Result<Vec<DepthMap>> {
    let mut out = vec![depth.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}
