//! Finite-difference verification of every analytic adjoint.
//!
//! Each check perturbs one coordinate of one parameter block at a time and
//! compares the analytic derivative of a scalar objective with the central
//! difference at step `h`. Second differences at `h`, `h/2` and `h/4` reveal
//! a kink (an absolute value, a clamp or a bilinear cell boundary) inside the
//! stencil; such coordinates are excluded and counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{rigid_flow, rigid_flow_vjp, FlowField2D, Intrinsics, PoseSE3};
use crate::image::{DepthMap, ImageBuffer};
use crate::losses::{
    auxiliary_loss, data_fidelity, edge_aware_smoothness, field_smoothness, multiscale_total_loss,
    residual_smoothness, total_loss, Objective, StructureParams,
};
use crate::photometric::{photometric_error_masked, photometric_error_vjp, LossWeights};
use crate::warping::{bilinear_sample, bilinear_sample_vjp, VisibilityMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Side length of the square random instances.
    pub size: usize,
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Share of non-excluded coordinates that must pass.
    pub required_fraction: f64,
    /// Largest share of coordinates that may be excluded as kinks before a
    /// check fails regardless of the others.
    pub max_excluded_fraction: f64,
    /// Random instances over which the pose blocks are pooled.
    pub pose_instances: usize,
    /// Side length of the extra pose instances. Every pixel adds kinks to the
    /// six pose coordinates, so smaller images leave more of them testable.
    pub pose_size: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            size: 16,
            step: 1e-4,
            tolerance: 1e-4,
            required_fraction: 0.99,
            max_excluded_fraction: 0.25,
            pose_instances: 16,
            pose_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: String,
    pub block: String,
    pub tested: usize,
    pub excluded: usize,
    pub passed: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

impl TermReport {
    fn verdict(&self, cfg: &GradcheckConfig) -> bool {
        self.pass_fraction() >= cfg.required_fraction
            && (self.excluded as f64) <= cfg.max_excluded_fraction * self.tested as f64
    }

    fn absorb(&mut self, other: &TermReport, cfg: &GradcheckConfig) {
        self.tested += other.tested;
        self.excluded += other.excluded;
        self.passed += other.passed;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.pass = self.verdict(cfg);
    }

    pub fn pass_fraction(&self) -> f64 {
        let n = self.tested - self.excluded;
        if n == 0 {
            1.0
        } else {
            self.passed as f64 / n as f64
        }
    }
}

/// Relative error with a floor of `1e-6` times the largest derivative in the
/// block, so that coordinates whose derivative vanishes are judged against
/// the block's scale.
fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// A coordinate is a kink point when the curvature test deviates by more than
/// this share of the tolerance.
const KINK_SHARE: f64 = 0.25;

/// Settings of one pass over an instance. Extra instances only repeat the
/// six-coordinate pose blocks, which are too small to judge on one instance.
struct Ctx {
    cfg: GradcheckConfig,
    pose_only: bool,
}

fn check_block(
    ctx: &Ctx,
    term: &str,
    block: &str,
    x: &[f64],
    analytic: &[f64],
    f: impl Fn(&[f64]) -> Result<f64>,
) -> Result<TermReport> {
    assert_eq!(x.len(), analytic.len(), "{term}/{block}: gradient length");
    let cfg = &ctx.cfg;
    let mut report = TermReport {
        term: term.into(),
        block: block.into(),
        tested: 0,
        excluded: 0,
        passed: 0,
        max_rel_error: 0.0,
        pass: true,
    };
    if ctx.pose_only && !block.contains("pose") {
        return Ok(report);
    }
    let h = cfg.step;
    let f0 = f(x)?;
    let mut work = x.to_vec();
    // Central difference and `s·f''` estimate at step `s`.
    let mut probe = |i: usize, s: f64| -> Result<(f64, f64)> {
        work[i] = x[i] + s;
        let fp = f(&work)?;
        work[i] = x[i] - s;
        let fm = f(&work)?;
        work[i] = x[i];
        Ok(((fp - fm) / (2.0 * s), (fp - 2.0 * f0 + fm) / s))
    };
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let (d, e) = probe(i, h)?;
        let (_, e2) = probe(i, h / 2.0)?;
        let (_, e4) = probe(i, h / 4.0)?;
        // Smooth: `s·f''` shrinks in proportion to `s`. A slope jump `J` at
        // distance `δ < s` adds `J (1 − δ/s)` instead, which no single
        // proportional rescaling explains at both smaller steps.
        let kink = (e2 - e / 2.0).abs().max((e4 - e / 4.0).abs());
        numeric.push((d, kink));
    }
    let scale = numeric.iter().map(|(d, _)| d.abs()).fold(0.0, f64::max);
    let floor = (1e-6 * scale).max(1e-12);
    let (mut excluded, mut passed, mut max_rel) = (0, 0, 0.0f64);
    for (&a, &(n, kink)) in analytic.iter().zip(&numeric) {
        if kink > KINK_SHARE * cfg.tolerance * n.abs().max(floor) {
            excluded += 1;
            continue;
        }
        let e = relative_error(a, n, floor);
        max_rel = max_rel.max(e);
        if e < cfg.tolerance {
            passed += 1;
        }
    }
    report.tested = x.len();
    report.excluded = excluded;
    report.passed = passed;
    report.max_rel_error = max_rel;
    report.pass = report.verdict(cfg);
    Ok(report)
}

struct Instance {
    k: Intrinsics,
    target: ImageBuffer,
    sources: Vec<ImageBuffer>,
    log_depth: ImageBuffer,
    poses: Vec<PoseSE3>,
    af: Vec<ImageBuffer>,
    flows: Vec<FlowField2D>,
    masks: Vec<VisibilityMask>,
    weights: LossWeights,
}

fn textured(rng: &mut ChaCha8Rng, n: usize) -> ImageBuffer {
    let waves: Vec<[f64; 3]> = (0..3)
        .map(|_| [rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.0..6.3)])
        .collect();
    ImageBuffer::from_fn(n, n, 3, |x, y, c| {
        let s: f64 = waves
            .iter()
            .enumerate()
            .map(|(i, w)| (w[0] * x as f64 + w[1] * y as f64 + w[2] + (c * (i + 1)) as f64).sin())
            .sum();
        0.5 + 0.12 * s
    })
}

impl Instance {
    fn random(n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (n as f64 - 1.0) / 2.0;
        let k = Intrinsics::new(1.2 * n as f64, 1.2 * n as f64, c, c, n, n)?;
        let target = textured(&mut rng, n);
        let sources = vec![textured(&mut rng, n), textured(&mut rng, n)];
        let pose = |rng: &mut ChaCha8Rng| {
            PoseSE3::new(
                [0, 1, 2].map(|_| rng.gen_range(-0.03..0.03)),
                [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-3.0..3.0)],
            )
        };
        let poses = vec![pose(&mut rng), pose(&mut rng)];
        let log_depth = ImageBuffer::from_fn(n, n, 1, |_, _, _| rng.gen_range(50f64..150.0).ln());
        let af = (0..2)
            .map(|_| ImageBuffer::from_fn(n, n, 3, |_, _, _| rng.gen_range(-0.1..0.1)))
            .collect();
        let flows = (0..2)
            .map(|_| FlowField2D::from_fn(n, n, |_, _| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]))
            .collect();
        let masks = (0..2)
            .map(|_| VisibilityMask {
                width: n,
                height: n,
                visible: (0..n * n).map(|_| rng.gen_bool(0.85)).collect(),
            })
            .collect();
        Ok(Self {
            k,
            target,
            sources,
            log_depth,
            poses,
            af,
            flows,
            masks,
            weights: LossWeights {
                alpha: 0.85,
                kappa: 1.0,
                lambda1: 0.5,
                lambda2: 0.3,
                lambda3: 0.2,
            },
        })
    }

    fn depth(&self) -> DepthMap {
        self.log_depth.map(f64::exp)
    }

    fn objective(&self) -> Objective<'_> {
        Objective {
            target: &self.target,
            sources: &self.sources,
            intrinsics: self.k,
            flows: &self.flows,
            masks: &self.masks,
            weights: self.weights,
        }
    }

    fn params(&self) -> StructureParams {
        StructureParams {
            depth: self.depth(),
            poses: self.poses.clone(),
            af: self.af.clone(),
        }
    }
}

fn with_data(like: &ImageBuffer, data: &[f64]) -> ImageBuffer {
    ImageBuffer::from_vec(like.width(), like.height(), like.channels(), data.to_vec()).expect("same length")
}

fn pose_of(v: &[f64]) -> PoseSE3 {
    PoseSE3::from_vector([v[0], v[1], v[2], v[3], v[4], v[5]])
}

fn flat_flow(f: &FlowField2D) -> Vec<f64> {
    f.vectors.iter().flat_map(|v| *v).collect()
}

fn flow_from(like: &FlowField2D, data: &[f64]) -> FlowField2D {
    let mut f = like.clone();
    for (v, d) in f.vectors.iter_mut().zip(data.chunks(2)) {
        *v = [d[0], d[1]];
    }
    f
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rigid_flow_checks(cfg: &Ctx, inst: &Instance, rng: &mut ChaCha8Rng) -> Result<Vec<TermReport>> {
    let n = inst.k.width * inst.k.height;
    let upstream: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let objective = |depth: &DepthMap, pose: &PoseSE3| -> Result<f64> {
        let f = rigid_flow(depth, pose, &inst.k)?;
        Ok(f.vectors.iter().zip(&upstream).map(|(v, g)| v[0] * g[0] + v[1] * g[1]).sum())
    };
    let pose = inst.poses[0];
    let depth = inst.depth();
    let (g_logd, g_pose) = rigid_flow_vjp(&depth, &pose, &inst.k, &upstream)?;
    Ok(vec![
        check_block(cfg, "rigid_flow", "log_depth", inst.log_depth.data(), g_logd.data(), |x| {
            objective(&with_data(&inst.log_depth, x).map(f64::exp), &pose)
        })?,
        check_block(cfg, "rigid_flow", "pose", &pose.to_vector(), &g_pose, |x| objective(&depth, &pose_of(x)))?,
    ])
}

fn sampling_checks(cfg: &Ctx, inst: &Instance, rng: &mut ChaCha8Rng) -> Result<Vec<TermReport>> {
    let (w, h) = (inst.k.width, inst.k.height);
    let src = &inst.sources[0];
    let coords = inst.flows[0].target_coords();
    let upstream = ImageBuffer::from_fn(w, h, src.channels(), |_, _, _| rng.gen_range(-1.0..1.0));
    let (g_src, g_coords) = bilinear_sample_vjp(src, &coords, &upstream)?;
    let flat: Vec<f64> = coords.iter().flat_map(|c| *c).collect();
    let g_flat: Vec<f64> = g_coords.iter().flat_map(|c| *c).collect();
    Ok(vec![
        check_block(cfg, "bilinear_sample", "source", src.data(), g_src.data(), |x| {
            Ok(dot(bilinear_sample(&with_data(src, x), &coords, w, h)?.data(), upstream.data()))
        })?,
        check_block(cfg, "bilinear_sample", "coords", &flat, &g_flat, |x| {
            let c: Vec<[f64; 2]> = x.chunks(2).map(|p| [p[0], p[1]]).collect();
            Ok(dot(bilinear_sample(src, &c, w, h)?.data(), upstream.data()))
        })?,
    ])
}

fn photometric_checks(cfg: &Ctx, inst: &Instance, rng: &mut ChaCha8Rng) -> Result<Vec<TermReport>> {
    let (a, b) = (&inst.sources[0], &inst.target);
    let mask = Some(inst.masks[0].visible.as_slice());
    let alpha = inst.weights.alpha;
    let upstream = ImageBuffer::from_fn(a.width(), a.height(), 1, |_, _, _| rng.gen_range(0.0..1.0));
    let (ga, gb) = photometric_error_vjp(a, b, alpha, mask, &upstream)?;
    let value = |a: &ImageBuffer, b: &ImageBuffer| -> Result<f64> {
        Ok(dot(photometric_error_masked(a, b, alpha, mask)?.data(), upstream.data()))
    };
    Ok(vec![
        check_block(cfg, "photometric_error", "first", a.data(), ga.data(), |x| value(&with_data(a, x), b))?,
        check_block(cfg, "photometric_error", "second", b.data(), gb.data(), |x| value(a, &with_data(b, x)))?,
    ])
}

fn data_fidelity_checks(cfg: &Ctx, inst: &Instance) -> Result<Vec<TermReport>> {
    let alpha = inst.weights.alpha;
    let eval = |log_depth: &ImageBuffer, poses: &[PoseSE3], af: &[ImageBuffer]| {
        data_fidelity(&inst.target, &inst.sources, &log_depth.map(f64::exp), poses, af, &inst.masks, &inst.k, alpha)
    };
    let base = eval(&inst.log_depth, &inst.poses, &inst.af)?;
    let mut out = vec![check_block(
        cfg,
        "data_fidelity",
        "log_depth",
        inst.log_depth.data(),
        base.grad_log_depth.data(),
        |x| Ok(eval(&with_data(&inst.log_depth, x), &inst.poses, &inst.af)?.value),
    )?];
    for s in 0..inst.sources.len() {
        out.push(check_block(
            cfg,
            "data_fidelity",
            &format!("pose/{s}"),
            &inst.poses[s].to_vector(),
            &base.grad_poses[s],
            |x| {
                let mut poses = inst.poses.clone();
                poses[s] = pose_of(x);
                Ok(eval(&inst.log_depth, &poses, &inst.af)?.value)
            },
        )?);
        out.push(check_block(
            cfg,
            "data_fidelity",
            &format!("af/{s}"),
            inst.af[s].data(),
            base.grad_af[s].data(),
            |x| {
                let mut af = inst.af.clone();
                af[s] = with_data(&inst.af[s], x);
                Ok(eval(&inst.log_depth, &inst.poses, &af)?.value)
            },
        )?);
    }
    Ok(out)
}

fn regularizer_checks(cfg: &Ctx, inst: &Instance) -> Result<Vec<TermReport>> {
    let (af, target, warped) = (&inst.af[0], &inst.target, &inst.sources[1]);
    let rs = residual_smoothness(af, target, warped)?;
    let depth = inst.depth();
    let (_, g_depth) = edge_aware_smoothness(&depth, target)?;
    let field = inst.flows[0].to_image();
    let (_, g_field) = field_smoothness(&field, target)?;
    Ok(vec![
        check_block(cfg, "residual_smoothness", "af", af.data(), rs.grad_af.data(), |x| {
            Ok(residual_smoothness(&with_data(af, x), target, warped)?.value)
        })?,
        check_block(cfg, "residual_smoothness", "source_warped", warped.data(), rs.grad_source_warped.data(), |x| {
            Ok(residual_smoothness(af, target, &with_data(warped, x))?.value)
        })?,
        check_block(cfg, "edge_aware_smoothness", "depth", depth.data(), g_depth.data(), |x| {
            Ok(edge_aware_smoothness(&with_data(&depth, x), target)?.0)
        })?,
        check_block(cfg, "field_smoothness", "flow", field.data(), g_field.data(), |x| {
            Ok(field_smoothness(&with_data(&field, x), target)?.0)
        })?,
    ])
}

fn auxiliary_checks(cfg: &Ctx, inst: &Instance) -> Result<Vec<TermReport>> {
    let alpha = inst.weights.alpha;
    let eval = |flows: &[FlowField2D], af: &[ImageBuffer]| {
        auxiliary_loss(&inst.target, &inst.sources, flows, af, &inst.masks, alpha)
    };
    let base = eval(&inst.flows, &inst.af)?;
    let mut out = Vec::new();
    for s in 0..inst.sources.len() {
        out.push(check_block(cfg, "auxiliary_loss", &format!("af/{s}"), inst.af[s].data(), base.grad_af[s].data(), |x| {
            let mut af = inst.af.clone();
            af[s] = with_data(&inst.af[s], x);
            Ok(eval(&inst.flows, &af)?.value)
        })?);
        let g_flow: Vec<f64> = base.grad_flows[s].iter().flat_map(|v| *v).collect();
        out.push(check_block(cfg, "auxiliary_loss", &format!("flow/{s}"), &flat_flow(&inst.flows[s]), &g_flow, |x| {
            let mut flows = inst.flows.clone();
            flows[s] = flow_from(&inst.flows[s], x);
            Ok(eval(&flows, &inst.af)?.value)
        })?);
    }
    Ok(out)
}

fn total_checks(cfg: &Ctx, inst: &Instance) -> Result<Vec<TermReport>> {
    let obj = inst.objective();
    let params = inst.params();
    let value = |p: &StructureParams| -> Result<f64> { Ok(total_loss(&obj, p, false)?.0.total) };
    let g = total_loss(&obj, &params, true)?.1.expect("requested");
    let mut out = vec![check_block(cfg, "total_loss", "log_depth", inst.log_depth.data(), g.log_depth.data(), |x| {
        value(&StructureParams {
            depth: with_data(&inst.log_depth, x).map(f64::exp),
            ..params.clone()
        })
    })?];
    for s in 0..inst.sources.len() {
        out.push(check_block(cfg, "total_loss", &format!("pose/{s}"), &inst.poses[s].to_vector(), &g.poses[s], |x| {
            let mut p = params.clone();
            p.poses[s] = pose_of(x);
            value(&p)
        })?);
        out.push(check_block(cfg, "total_loss", &format!("af/{s}"), inst.af[s].data(), g.af[s].data(), |x| {
            let mut p = params.clone();
            p.af[s] = with_data(&inst.af[s], x);
            value(&p)
        })?);
    }
    Ok(out)
}

fn multiscale_checks(cfg: &Ctx, inst: &Instance) -> Result<Vec<TermReport>> {
    let obj = inst.objective();
    let halve = |img: &ImageBuffer| crate::pyramid::downsample(img);
    let coarse = StructureParams {
        depth: halve(&inst.depth())?,
        poses: inst.poses.clone(),
        af: inst.af.iter().map(halve).collect::<Result<_>>()?,
    };
    let scales = vec![inst.params(), coarse];
    let value = |s: &[StructureParams]| -> Result<f64> { Ok(multiscale_total_loss(&obj, s, false)?.0.total) };
    let grads = multiscale_total_loss(&obj, &scales, true)?.1.expect("requested");
    let mut out = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let log_depth = scales[i].depth.map(f64::ln);
        out.push(check_block(cfg, "multiscale_total_loss", &format!("scale{i}/log_depth"), log_depth.data(), g.log_depth.data(), |x| {
            let mut s = scales.clone();
            s[i].depth = with_data(&log_depth, x).map(f64::exp);
            value(&s)
        })?);
        out.push(check_block(cfg, "multiscale_total_loss", &format!("scale{i}/pose/0"), &scales[i].poses[0].to_vector(), &g.poses[0], |x| {
            let mut s = scales.clone();
            s[i].poses[0] = pose_of(x);
            value(&s)
        })?);
        out.push(check_block(cfg, "multiscale_total_loss", &format!("scale{i}/af/1"), scales[i].af[1].data(), g.af[1].data(), |x| {
            let mut s = scales.clone();
            s[i].af[1] = with_data(&scales[i].af[1], x);
            value(&s)
        })?);
    }
    Ok(out)
}

fn run_instance(ctx: &Ctx, seed: u64) -> Result<Vec<TermReport>> {
    let size = if ctx.pose_only { ctx.cfg.pose_size } else { ctx.cfg.size };
    let inst = Instance::random(size, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = rigid_flow_checks(ctx, &inst, &mut rng)?;
    out.extend(sampling_checks(ctx, &inst, &mut rng)?);
    out.extend(photometric_checks(ctx, &inst, &mut rng)?);
    out.extend(data_fidelity_checks(ctx, &inst)?);
    out.extend(regularizer_checks(ctx, &inst)?);
    out.extend(auxiliary_checks(ctx, &inst)?);
    out.extend(total_checks(ctx, &inst)?);
    out.extend(multiscale_checks(ctx, &inst)?);
    Ok(out)
}

/// Runs every adjoint check on one random instance, pooling the pose blocks
/// over `pose_instances` instances.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<TermReport>> {
    let mut ctx = Ctx {
        cfg: cfg.clone(),
        pose_only: false,
    };
    let mut out = run_instance(&ctx, cfg.seed)?;
    ctx.pose_only = true;
    for i in 1..cfg.pose_instances.max(1) {
        for extra in run_instance(&ctx, cfg.seed.wrapping_add(i as u64))? {
            if let Some(r) = out.iter_mut().find(|r| r.term == extra.term && r.block == extra.block) {
                r.absorb(&extra, cfg);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_wrong_gradient_is_caught() {
        let cfg = Ctx {
            cfg: GradcheckConfig::default(),
            pose_only: false,
        };
        let x = [0.3, -1.2, 2.0];
        let f = |x: &[f64]| Ok(x.iter().map(|v| v * v * v).sum::<f64>());
        let good: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
        assert!(check_block(&cfg, "cube", "x", &x, &good, f).unwrap().pass);
        let bad: Vec<f64> = good.iter().map(|g| g * 1.001).collect();
        let r = check_block(&cfg, "cube", "x", &x, &bad, f).unwrap();
        assert!(!r.pass && r.passed == 0 && r.excluded == 0);
    }

    #[test]
    fn kinks_are_excluded_not_passed() {
        let cfg = Ctx {
            cfg: GradcheckConfig {
                max_excluded_fraction: 0.5,
                ..Default::default()
            },
            pose_only: false,
        };
        // |x| at 2e-5 has its kink inside the step; 0.7 is smooth.
        let x = [2e-5, 0.7];
        let f = |x: &[f64]| Ok(x.iter().map(|v| v.abs()).sum::<f64>());
        let r = check_block(&cfg, "abs", "x", &x, &[1.0, 1.0], f).unwrap();
        assert_eq!((r.excluded, r.passed), (1, 1));
        assert!(r.pass);
    }
}
