//! Loss terms of the self-supervised objective and their adjoints.
//!
//! All sums over pixels are normalized to means (over visible pixels for the
//! masked terms, over valid difference pairs for the smoothness terms), which
//! keeps term magnitudes independent of resolution. Spatial gradients are
//! forward differences; the last row/column has none.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rigid_flow, rigid_flow_vjp, FlowField2D, Intrinsics, PoseSE3};
use crate::image::{DepthMap, ImageBuffer};
use crate::photometric::{
    calibrate_brightness, calibrate_brightness_vjp, photometric_error_masked, photometric_error_vjp,
    LossWeights,
};
use crate::pyramid::{upsample, upsample_vjp};
use crate::warping::{bilinear_sample, bilinear_sample_vjp, VisibilityMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data_fidelity: f64,
    pub l_rs: f64,
    pub l_ax: f64,
    pub l_es: f64,
    pub total: f64,
    /// Euclidean norms of the total gradient per parameter block (zero when
    /// gradients were not requested).
    pub grad_norm_depth: f64,
    pub grad_norm_pose: f64,
    pub grad_norm_af: f64,
}

impl LossBreakdown {
    fn assemble(data: f64, l_rs: f64, l_ax: f64, l_es: f64, w: &LossWeights) -> Self {
        Self {
            data_fidelity: data,
            l_rs,
            l_ax,
            l_es,
            total: data + w.kappa * (w.lambda1 * l_rs + w.lambda2 * l_ax + w.lambda3 * l_es),
            ..Default::default()
        }
    }
}

/// Depth, one relative pose and one appearance-flow offset field per source.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureParams {
    pub depth: DepthMap,
    pub poses: Vec<PoseSE3>,
    /// Brightness offsets `C_δ` (already squashed), one per source.
    pub af: Vec<ImageBuffer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureGradients {
    pub log_depth: ImageBuffer,
    pub poses: Vec<[f64; 6]>,
    pub af: Vec<ImageBuffer>,
}

impl StructureGradients {
    fn zeros(w: usize, h: usize, c: usize, n: usize) -> Self {
        Self {
            log_depth: ImageBuffer::new(w, h, 1),
            poses: vec![[0.0; 6]; n],
            af: vec![ImageBuffer::new(w, h, c); n],
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean of the masked photometric error and the per-pixel gradient scale that
/// feeds its adjoint.
fn masked_mean_photometric(
    a: &ImageBuffer,
    b: &ImageBuffer,
    alpha: f64,
    mask: &[bool],
) -> Result<(f64, ImageBuffer)> {
    let count = mask.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::DegenerateVisibility("no visible pixel".into()));
    }
    let map = photometric_error_masked(a, b, alpha, Some(mask))?;
    let value = map.data().iter().sum::<f64>() / count as f64;
    let inv = 1.0 / count as f64;
    let grad_map = ImageBuffer::from_vec(
        a.width(),
        a.height(),
        1,
        mask.iter().map(|&v| if v { inv } else { 0.0 }).collect(),
    )?;
    Ok((value, grad_map))
}

fn scale_image(img: &ImageBuffer, s: f64) -> ImageBuffer {
    img.map(|v| v * s)
}

fn add_into(dst: &mut ImageBuffer, src: &ImageBuffer) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// A source view resampled through the rigid flow of the current structure.
struct RigidWarp {
    coords: Vec<[f64; 2]>,
    valid: Vec<bool>,
    synthesized: ImageBuffer,
}

impl RigidWarp {
    fn new(source: &ImageBuffer, depth: &DepthMap, pose: &PoseSE3, k: &Intrinsics) -> Result<Self> {
        let flow = rigid_flow(depth, pose, k)?;
        let coords = flow.target_coords();
        let synthesized = bilinear_sample(source, &coords, k.width, k.height)?;
        Ok(Self {
            coords,
            valid: flow.valid,
            synthesized,
        })
    }

    /// Pulls a gradient on the synthesized view back to log-depth and pose.
    fn backprop(
        &self,
        source: &ImageBuffer,
        depth: &DepthMap,
        pose: &PoseSE3,
        k: &Intrinsics,
        grad_synth: &ImageBuffer,
    ) -> Result<(ImageBuffer, [f64; 6])> {
        let (_, g_coords) = bilinear_sample_vjp(source, &self.coords, grad_synth)?;
        rigid_flow_vjp(depth, pose, k, &g_coords)
    }
}

fn check_sources(target: &ImageBuffer, sources: &[ImageBuffer], n: usize, what: &str) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("at least one source view is required".into()));
    }
    if n != sources.len() {
        return Err(Error::InvalidArgument(format!(
            "{what}: {n} entries for {} sources",
            sources.len()
        )));
    }
    for s in sources {
        target.ensure_same_shape(s, "source view")?;
    }
    Ok(())
}

/// Output of [`data_fidelity`].
#[derive(Clone, Debug)]
pub struct DataFidelity {
    pub value: f64,
    pub grad_log_depth: ImageBuffer,
    pub grad_poses: Vec<[f64; 6]>,
    pub grad_af: Vec<ImageBuffer>,
    /// Rigid-flow synthesized view per source.
    pub synthesized: Vec<ImageBuffer>,
}

/// `Σ_s mean_{V} Φ(I^{s→t}, I^t + C_δ)` with `I^{s→t}` synthesized through the
/// rigid flow of `depth` and each source's pose. Pixels whose rigid flow is
/// invalid are dropped from the mask.
#[allow(clippy::too_many_arguments)]
pub fn data_fidelity(
    target: &ImageBuffer,
    sources: &[ImageBuffer],
    depth: &DepthMap,
    poses: &[PoseSE3],
    af: &[ImageBuffer],
    masks: &[VisibilityMask],
    k: &Intrinsics,
    alpha: f64,
) -> Result<DataFidelity> {
    check_sources(target, sources, poses.len(), "poses")?;
    check_sources(target, sources, af.len(), "appearance flows")?;
    check_sources(target, sources, masks.len(), "masks")?;
    let (w, h, c) = (target.width(), target.height(), target.channels());
    let mut out = DataFidelity {
        value: 0.0,
        grad_log_depth: ImageBuffer::new(w, h, 1),
        grad_poses: vec![[0.0; 6]; sources.len()],
        grad_af: Vec::with_capacity(sources.len()),
        synthesized: Vec::with_capacity(sources.len()),
    };
    for s in 0..sources.len() {
        let warp = RigidWarp::new(&sources[s], depth, &poses[s], k)?;
        let mask = masks[s].and(&warp.valid);
        let calibrated = calibrate_brightness(target, &af[s])?;
        let (value, gmap) = masked_mean_photometric(&warp.synthesized, &calibrated, alpha, &mask.visible)
            .map_err(|e| Error::DegenerateVisibility(format!("source {s}: {e}")))?;
        out.value += value;
        let (g_syn, g_cal) =
            photometric_error_vjp(&warp.synthesized, &calibrated, alpha, Some(&mask.visible), &gmap)?;
        out.grad_af.push(calibrate_brightness_vjp(target, &af[s], &g_cal)?);
        let (g_logd, g_pose) = warp.backprop(&sources[s], depth, &poses[s], k, &g_syn)?;
        add_into(&mut out.grad_log_depth, &g_logd);
        out.grad_poses[s] = g_pose;
        out.synthesized.push(warp.synthesized);
    }
    let _ = c;
    Ok(out)
}

/// Output of [`residual_smoothness`].
#[derive(Clone, Debug)]
pub struct ResidualSmoothness {
    pub value: f64,
    pub grad_af: ImageBuffer,
    pub grad_source_warped: ImageBuffer,
}

/// `mean |∇C_δ| · exp(−|∇ρ|)` with `ρ = |I^t − I^{s→t}|` (channel-averaged),
/// summed over the horizontal and vertical directions.
pub fn residual_smoothness(
    af: &ImageBuffer,
    target: &ImageBuffer,
    source_warped: &ImageBuffer,
) -> Result<ResidualSmoothness> {
    af.ensure_same_shape(target, "appearance flow")?;
    target.ensure_same_shape(source_warped, "warped source")?;
    let (w, h, c) = (af.width(), af.height(), af.channels());
    let inv_c = 1.0 / c as f64;
    let rho: Vec<f64> = (0..w * h)
        .map(|p| {
            target
                .pixel(p)
                .iter()
                .zip(source_warped.pixel(p))
                .map(|(t, s)| (t - s).abs())
                .sum::<f64>()
                * inv_c
        })
        .collect();
    let mut grad_af = ImageBuffer::new(w, h, c);
    let mut grad_rho = vec![0.0; w * h];
    let mut value = 0.0;
    let a = af.data();
    let directions: [(usize, usize, usize); 2] = [(1, 0, 1), (0, 1, w)];
    for (dx, dy, step) in directions {
        let nx = w - dx;
        let ny = h - dy;
        if nx == 0 || ny == 0 {
            continue;
        }
        let inv_n = 1.0 / (nx * ny) as f64;
        let mut sum = 0.0;
        for y in 0..ny {
            for x in 0..nx {
                let p = y * w + x;
                let q = p + step;
                let d_rho = rho[q] - rho[p];
                let weight = (-d_rho.abs()).exp();
                let mut mag = 0.0;
                for ch in 0..c {
                    let d = a[q * c + ch] - a[p * c + ch];
                    mag += d.abs();
                    let g = sign(d) * weight * inv_c * inv_n;
                    grad_af.data_mut()[q * c + ch] += g;
                    grad_af.data_mut()[p * c + ch] -= g;
                }
                mag *= inv_c;
                sum += mag * weight;
                let g_rho = -mag * weight * sign(d_rho) * inv_n;
                grad_rho[q] += g_rho;
                grad_rho[p] -= g_rho;
            }
        }
        value += sum * inv_n;
    }
    let grad_source_warped = ImageBuffer::from_fn(w, h, c, |x, y, ch| {
        let p = y * w + x;
        grad_rho[p] * inv_c * sign(source_warped.get(x, y, ch) - target.get(x, y, ch))
    });
    Ok(ResidualSmoothness {
        value,
        grad_af,
        grad_source_warped,
    })
}

/// Edge-aware first-order smoothness of an arbitrary field:
/// `mean |∇F| · exp(−|∇I|)` per direction, channel-averaged on both sides.
pub fn field_smoothness(field: &ImageBuffer, image: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    if field.width() != image.width() || field.height() != image.height() {
        return Err(Error::Shape("smoothness field and guide image".into()));
    }
    let (w, h, k) = (field.width(), field.height(), field.channels());
    let ci = image.channels();
    let (inv_k, inv_ci) = (1.0 / k as f64, 1.0 / ci as f64);
    let f = field.data();
    let im = image.data();
    let mut grad = ImageBuffer::new(w, h, k);
    let mut value = 0.0;
    for (dx, dy, step) in [(1usize, 0usize, 1usize), (0, 1, w)] {
        let nx = w - dx;
        let ny = h - dy;
        if nx == 0 || ny == 0 {
            continue;
        }
        let inv_n = 1.0 / (nx * ny) as f64;
        let mut sum = 0.0;
        for y in 0..ny {
            for x in 0..nx {
                let p = y * w + x;
                let q = p + step;
                let edge = (0..ci).map(|ch| (im[q * ci + ch] - im[p * ci + ch]).abs()).sum::<f64>() * inv_ci;
                let weight = (-edge).exp();
                let mut mag = 0.0;
                for ch in 0..k {
                    let d = f[q * k + ch] - f[p * k + ch];
                    mag += d.abs();
                    let g = sign(d) * weight * inv_k * inv_n;
                    grad.data_mut()[q * k + ch] += g;
                    grad.data_mut()[p * k + ch] -= g;
                }
                sum += mag * inv_k * weight;
            }
        }
        value += sum * inv_n;
    }
    Ok((value, grad))
}

/// Edge-aware smoothness of mean-normalized depth `D / mean(D)`; returns the
/// value and its gradient with respect to depth.
pub fn edge_aware_smoothness(depth: &DepthMap, target: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    if depth.channels() != 1 {
        return Err(Error::Shape("depth must have one channel".into()));
    }
    let mean = depth.mean();
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument("depth mean must be positive".into()));
    }
    let normalized = depth.map(|d| d / mean);
    let (value, g_n) = field_smoothness(&normalized, target)?;
    let n = depth.data().len() as f64;
    let dot: f64 = g_n.data().iter().zip(depth.data()).map(|(g, d)| g * d).sum();
    let correction = dot / (mean * mean * n);
    let grad = g_n.map(|g| g / mean - correction);
    Ok((value, grad))
}

/// Output of [`auxiliary_loss`].
#[derive(Clone, Debug)]
pub struct AuxiliaryLoss {
    pub value: f64,
    pub grad_af: Vec<ImageBuffer>,
    pub grad_flows: Vec<Vec<[f64; 2]>>,
    pub registered: Vec<ImageBuffer>,
}

/// `Σ_s mean_{V} Φ(I^s(p + F_s(p)), I^t + C_δ)`: the data term with the
/// optical-flow registered source in place of the rigid synthesis.
pub fn auxiliary_loss(
    target: &ImageBuffer,
    sources: &[ImageBuffer],
    flows: &[FlowField2D],
    af: &[ImageBuffer],
    masks: &[VisibilityMask],
    alpha: f64,
) -> Result<AuxiliaryLoss> {
    check_sources(target, sources, flows.len(), "flows")?;
    check_sources(target, sources, af.len(), "appearance flows")?;
    check_sources(target, sources, masks.len(), "masks")?;
    let (w, h) = (target.width(), target.height());
    let mut out = AuxiliaryLoss {
        value: 0.0,
        grad_af: Vec::with_capacity(sources.len()),
        grad_flows: Vec::with_capacity(sources.len()),
        registered: Vec::with_capacity(sources.len()),
    };
    for s in 0..sources.len() {
        let coords = flows[s].target_coords();
        let registered = bilinear_sample(&sources[s], &coords, w, h)?;
        let calibrated = calibrate_brightness(target, &af[s])?;
        let (value, gmap) = masked_mean_photometric(&registered, &calibrated, alpha, &masks[s].visible)
            .map_err(|e| Error::DegenerateVisibility(format!("source {s}: {e}")))?;
        out.value += value;
        let (g_reg, g_cal) =
            photometric_error_vjp(&registered, &calibrated, alpha, Some(&masks[s].visible), &gmap)?;
        out.grad_af.push(calibrate_brightness_vjp(target, &af[s], &g_cal)?);
        out.grad_flows.push(bilinear_sample_vjp(&sources[s], &coords, &g_reg)?.1);
        out.registered.push(registered);
    }
    Ok(out)
}

/// Frames, camera, frozen optical flows and masks against which structure
/// parameters are scored.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    pub target: &'a ImageBuffer,
    pub sources: &'a [ImageBuffer],
    pub intrinsics: Intrinsics,
    pub flows: &'a [FlowField2D],
    pub masks: &'a [VisibilityMask],
    pub weights: LossWeights,
}

impl Objective<'_> {
    fn validate(&self, params: &StructureParams) -> Result<()> {
        self.weights.validate()?;
        check_sources(self.target, self.sources, self.flows.len(), "flows")?;
        check_sources(self.target, self.sources, self.masks.len(), "masks")?;
        check_sources(self.target, self.sources, params.poses.len(), "poses")?;
        check_sources(self.target, self.sources, params.af.len(), "appearance flows")?;
        Ok(())
    }
}

/// `L = D + κ (λ1 L_rs + λ2 L_ax + λ3 L_es)` at one resolution, with the
/// gradient of `L` for every parameter block when `want_grad` is set.
pub fn total_loss(
    objective: &Objective<'_>,
    params: &StructureParams,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<StructureGradients>)> {
    objective.validate(params)?;
    let Objective {
        target,
        sources,
        intrinsics: k,
        flows,
        masks,
        weights: wt,
    } = *objective;
    let (w, h, c) = (target.width(), target.height(), target.channels());
    let n = sources.len();
    let reg = wt.kappa;
    let mut grads = want_grad.then(|| StructureGradients::zeros(w, h, c, n));

    let mut data = 0.0;
    let mut l_rs = 0.0;
    let mut l_ax = 0.0;
    for s in 0..n {
        let warp = RigidWarp::new(&sources[s], &params.depth, &params.poses[s], &k)?;
        let mask = masks[s].and(&warp.valid);
        let calibrated = calibrate_brightness(target, &params.af[s])?;
        let (d_s, gmap) = masked_mean_photometric(&warp.synthesized, &calibrated, wt.alpha, &mask.visible)
            .map_err(|e| Error::DegenerateVisibility(format!("source {s}: {e}")))?;
        data += d_s;

        let rs = residual_smoothness(&params.af[s], target, &warp.synthesized)?;
        l_rs += rs.value;

        let coords = flows[s].target_coords();
        let registered = bilinear_sample(&sources[s], &coords, w, h)?;
        let (ax_s, gmap_ax) = masked_mean_photometric(&registered, &calibrated, wt.alpha, &masks[s].visible)
            .map_err(|e| Error::DegenerateVisibility(format!("source {s}: {e}")))?;
        l_ax += ax_s;

        if let Some(g) = grads.as_mut() {
            let (g_syn, g_cal) = photometric_error_vjp(
                &warp.synthesized,
                &calibrated,
                wt.alpha,
                Some(&mask.visible),
                &gmap,
            )?;
            let (_, g_cal_ax) =
                photometric_error_vjp(&registered, &calibrated, wt.alpha, Some(&masks[s].visible), &gmap_ax)?;
            let ax_scale = reg * wt.lambda2;
            let rs_scale = reg * wt.lambda1;
            let g_cal_total = g_cal.zip_map(&g_cal_ax, |a, b| a + ax_scale * b)?;
            let mut g_af = calibrate_brightness_vjp(target, &params.af[s], &g_cal_total)?;
            add_into(&mut g_af, &scale_image(&rs.grad_af, rs_scale));
            g.af[s] = g_af;

            let g_syn_total = g_syn.zip_map(&rs.grad_source_warped, |a, b| a + rs_scale * b)?;
            let (g_logd, g_pose) =
                warp.backprop(&sources[s], &params.depth, &params.poses[s], &k, &g_syn_total)?;
            add_into(&mut g.log_depth, &g_logd);
            g.poses[s] = g_pose;
        }
    }

    let (l_es, g_depth) = edge_aware_smoothness(&params.depth, target)?;
    if let Some(g) = grads.as_mut() {
        let scale = reg * wt.lambda3;
        for ((gl, gd), d) in g
            .log_depth
            .data_mut()
            .iter_mut()
            .zip(g_depth.data())
            .zip(params.depth.data())
        {
            *gl += scale * gd * d;
        }
    }

    let mut breakdown = LossBreakdown::assemble(data, l_rs, l_ax, l_es, &wt);
    if let Some(g) = &grads {
        breakdown.grad_norm_depth = norm(g.log_depth.data());
        breakdown.grad_norm_pose = norm(&g.poses.iter().flatten().copied().collect::<Vec<_>>());
        breakdown.grad_norm_af = norm(&g.af.iter().flat_map(|a| a.data().iter().copied()).collect::<Vec<_>>());
    }
    Ok((breakdown, grads))
}

/// The brightness-constancy objective: photometric error against the raw
/// target, no appearance-flow terms. Computed independently of
/// [`total_loss`]; the two agree exactly when every offset is zero.
pub fn brightness_constancy_loss(objective: &Objective<'_>, depth: &DepthMap, poses: &[PoseSE3]) -> Result<LossBreakdown> {
    let Objective {
        target,
        sources,
        intrinsics: k,
        flows,
        masks,
        weights: wt,
    } = *objective;
    check_sources(target, sources, poses.len(), "poses")?;
    let (w, h) = (target.width(), target.height());
    let mut data = 0.0;
    let mut l_ax = 0.0;
    for s in 0..sources.len() {
        let flow = rigid_flow(depth, &poses[s], &k)?;
        let synthesized = bilinear_sample(&sources[s], &flow.target_coords(), w, h)?;
        let mask = masks[s].and(&flow.valid);
        data += masked_mean_photometric(&synthesized, target, wt.alpha, &mask.visible)?.0;
        let registered = bilinear_sample(&sources[s], &flows[s].target_coords(), w, h)?;
        l_ax += masked_mean_photometric(&registered, target, wt.alpha, &masks[s].visible)?.0;
    }
    let (l_es, _) = edge_aware_smoothness(depth, target)?;
    Ok(LossBreakdown {
        data_fidelity: data,
        l_rs: 0.0,
        l_ax,
        l_es,
        total: data + wt.kappa * (wt.lambda2 * l_ax + wt.lambda3 * l_es),
        ..Default::default()
    })
}

/// Averages [`total_loss`] over several scales. Each scale's depth and
/// offsets are bilinearly upsampled to the objective's resolution (scale `i`
/// is `2^i` times coarser) and scored there. Gradients are returned per scale
/// at that scale's resolution.
pub fn multiscale_total_loss(
    objective: &Objective<'_>,
    scales: &[StructureParams],
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<StructureGradients>>)> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("no scales".into()));
    }
    let (w, h) = (objective.target.width(), objective.target.height());
    let inv = 1.0 / scales.len() as f64;
    let mut acc = LossBreakdown::default();
    let mut grads = want_grad.then(Vec::new);
    for (i, p) in scales.iter().enumerate() {
        let factor = (1usize << i) as f64;
        let resample = |img: &ImageBuffer| -> Result<ImageBuffer> {
            if img.width() == w && img.height() == h {
                Ok(img.clone())
            } else {
                upsample(img, w, h, factor)
            }
        };
        let full = StructureParams {
            depth: resample(&p.depth)?,
            poses: p.poses.clone(),
            af: p.af.iter().map(resample).collect::<Result<_>>()?,
        };
        let (b, g) = total_loss(objective, &full, want_grad)?;
        acc.data_fidelity += b.data_fidelity * inv;
        acc.l_rs += b.l_rs * inv;
        acc.l_ax += b.l_ax * inv;
        acc.l_es += b.l_es * inv;
        acc.total += b.total * inv;
        if let (Some(list), Some(g)) = (grads.as_mut(), g) {
            let pull = |coarse: &ImageBuffer, fine_grad: &ImageBuffer| -> Result<ImageBuffer> {
                if coarse.width() == w && coarse.height() == h {
                    Ok(fine_grad.clone())
                } else {
                    upsample_vjp(coarse, fine_grad, factor)
                }
            };
            // log-depth gradient -> depth gradient at full resolution -> coarse.
            let g_depth_full = g.log_depth.zip_map(&full.depth, |gl, d| gl / d)?;
            let g_depth = pull(&p.depth, &g_depth_full)?;
            let log_depth = g_depth.zip_map(&p.depth, |gd, d| gd * d * inv)?;
            let af = p
                .af
                .iter()
                .zip(&g.af)
                .map(|(a, ga)| pull(a, ga).map(|x| x.map(|v| v * inv)))
                .collect::<Result<_>>()?;
            let poses = g.poses.iter().map(|gp| gp.map(|v| v * inv)).collect();
            list.push(StructureGradients { log_depth, poses, af });
        }
    }
    Ok((acc, grads))
}
