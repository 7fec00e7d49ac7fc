//! Depth error metrics with median scaling and capping, and 5-frame
//! trajectory error.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::image::DepthMap;

pub const DEFAULT_DEPTH_CAP: f64 = 150.0;
pub const DELTA_THRESHOLD: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    /// Millimeters.
    pub rmse: f64,
    pub rmse_log: f64,
    /// Percentage of pixels with `max(d*/d, d/d*) < 1.25`.
    pub delta: f64,
}

fn gt_valid(d: f64) -> bool {
    d > 0.0 && d.is_finite()
}

fn check_pair(pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if pred.channels() != 1 || gt.channels() != 1 {
        return Err(Error::Shape("depth maps must have one channel".into()));
    }
    pred.ensure_same_shape(gt, "predicted depth")
}

/// Median of a non-empty slice; even counts average the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Multiplies `pred` by `median(gt) / median(pred)`, both medians taken over
/// pixels where the ground truth is positive and finite.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<(DepthMap, f64)> {
    check_pair(pred, gt)?;
    let (p, g): (Vec<f64>, Vec<f64>) = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(_, &g)| gt_valid(g))
        .map(|(&p, &g)| (p, g))
        .unzip();
    let (Some(mp), Some(mg)) = (median(&p), median(&g)) else {
        return Err(Error::InvalidArgument("no valid ground-truth pixel".into()));
    };
    if mp == 0.0 || !mp.is_finite() {
        return Err(Error::InvalidArgument(format!("median of prediction is {mp}")));
    }
    let scale = mg / mp;
    Ok((pred.map(|d| d * scale), scale))
}

pub fn cap_depth(depth: &DepthMap, cap: f64) -> Result<DepthMap> {
    if !(cap > 0.0) {
        return Err(Error::InvalidArgument(format!("depth cap {cap} must be positive")));
    }
    Ok(depth.map(|d| d.min(cap)))
}

/// Error and accuracy metrics over pixels with valid ground truth.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    check_pair(pred, gt)?;
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log, mut within) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (&d, &g) in pred.data().iter().zip(gt.data()) {
        if !gt_valid(g) {
            continue;
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::InvalidArgument(format!("predicted depth {d} is not positive")));
        }
        let e = d - g;
        abs_rel += e.abs() / g;
        sq_rel += e * e / g;
        sq += e * e;
        sq_log += (d.ln() - g.ln()).powi(2);
        if (g / d).max(d / g) < DELTA_THRESHOLD {
            within += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no valid ground-truth pixel".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta: 100.0 * within as f64 / nf,
    })
}

/// Median scaling, capping, then [`depth_metrics`]. Returns the metrics and
/// the applied scale.
pub fn evaluate_depth(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<(DepthMetrics, f64)> {
    let (scaled, scale) = median_scale(pred, gt)?;
    let capped = cap_depth(&scaled, cap)?;
    Ok((depth_metrics(&capped, gt)?, scale))
}

/// Angle in degrees between two translation vectors, `None` when either is
/// zero.
pub fn translation_direction_error(pred: &PoseSE3, gt: &PoseSE3) -> Option<f64> {
    let (a, b) = (pred.translation_vector(), gt.translation_vector());
    let n = a.norm() * b.norm();
    (n > 0.0).then(|| (a.dot(&b) / n).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Pearson correlation, `None` when either sample is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // A series whose spread is rounding noise on its mean, such as a warped
    // constant, counts as constant.
    let flat = |ss: f64, m: f64| ss == 0.0 || (ss / n).sqrt() <= 1e-9 * m.abs();
    if flat(sxx, mx) || flat(syy, my) {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub per_snippet: Vec<f64>,
    /// Scale applied to the prediction in each snippet.
    pub scales: Vec<f64>,
    pub mean: f64,
}

pub const SNIPPET: usize = 5;

/// Camera positions of a snippet expressed in the frame of its first camera.
/// Poses map camera coordinates to world coordinates.
pub fn anchored_positions(poses: &[PoseSE3]) -> Vec<Vector3<f64>> {
    let r0t = poses[0].rotation().transpose();
    let p0 = poses[0].translation_vector();
    poses.iter().map(|p| r0t * (p.translation_vector() - p0)).collect()
}

/// Least-squares scale `s` minimizing `Σ |s·pred − gt|²` and the resulting RMSE.
pub fn align_scale(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> (f64, f64) {
    let num: f64 = pred.iter().zip(gt).map(|(p, g)| p.dot(g)).sum();
    let den: f64 = pred.iter().map(|p| p.norm_squared()).sum();
    let s = if den > 0.0 { num / den } else { 1.0 };
    let mse = pred.iter().zip(gt).map(|(p, g)| (p * s - g).norm_squared()).sum::<f64>() / pred.len() as f64;
    (s, mse.sqrt())
}

/// Absolute trajectory error averaged over all 5-frame windows. Each window
/// is re-anchored at its first frame and the prediction is aligned to the
/// ground truth by a single least-squares scale.
pub fn ate_5frame(pred: &[PoseSE3], gt: &[PoseSE3]) -> Result<AteResult> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectories differ in length ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < SNIPPET {
        return Err(Error::InvalidArgument(format!(
            "at least {SNIPPET} poses are required, got {}",
            pred.len()
        )));
    }
    let mut per_snippet = Vec::new();
    let mut scales = Vec::new();
    for start in 0..=pred.len() - SNIPPET {
        let p = anchored_positions(&pred[start..start + SNIPPET]);
        let g = anchored_positions(&gt[start..start + SNIPPET]);
        let (s, ate) = align_scale(&p, &g);
        per_snippet.push(ate);
        scales.push(s);
    }
    let mean = per_snippet.iter().sum::<f64>() / per_snippet.len() as f64;
    Ok(AteResult {
        per_snippet,
        scales,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageBuffer;

    fn map(v: &[f64]) -> DepthMap {
        ImageBuffer::from_vec(v.len(), 1, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn median_scaling_examples() {
        let gt = map(&[10.0, 20.0, 30.0, 45.0]);
        let (s, k) = median_scale(&gt.map(|d| 2.0 * d), &gt).unwrap();
        assert_eq!(k, 0.5);
        assert_eq!(s, gt);
        assert_eq!(median_scale(&gt, &gt).unwrap().1, 1.0);
        let (s, k) = median_scale(&map(&[1.0, 2.0, 3.0]), &map(&[2.0, 4.0, 8.0])).unwrap();
        assert_eq!(k, 2.0);
        assert_eq!(s.data(), &[2.0, 4.0, 6.0]);
        assert!(median_scale(&map(&[0.0, 0.0, 1.0]), &map(&[1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn invalid_ground_truth_is_ignored() {
        let gt = map(&[0.0, 2.0, f64::NAN, 4.0, 6.0]);
        let pred = map(&[100.0, 1.0, 100.0, 2.0, 3.0]);
        let (_, k) = median_scale(&pred, &gt).unwrap();
        assert_eq!(k, 2.0);
        let m = depth_metrics(&pred.map(|d| d * 2.0), &gt).unwrap();
        assert_eq!(m.abs_rel, 0.0);
    }

    #[test]
    fn capping() {
        let d = map(&[10.0, 200.0, 160.0]);
        assert_eq!(cap_depth(&d, 150.0).unwrap().data(), &[10.0, 150.0, 150.0]);
        assert_eq!(cap_depth(&d, 180.0).unwrap().data(), &[10.0, 180.0, 160.0]);
        assert_eq!(cap_depth(&map(&[1.0, 2.0]), 150.0).unwrap(), map(&[1.0, 2.0]));
        assert!(cap_depth(&d, 0.0).is_err());
    }

    #[test]
    fn metric_examples() {
        let gt = map(&[5.0, 10.0, 40.0]);
        let m = depth_metrics(&gt, &gt).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta), (0.0, 0.0, 0.0, 0.0, 100.0));
        let m = depth_metrics(&map(&[2.0]), &map(&[1.0])).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.delta), (1.0, 1.0, 1.0, 0.0));
        assert!((m.rmse_log - 2f64.ln()).abs() < 1e-15);
        let m = depth_metrics(&gt.map(|d| 1.2 * d), &gt).unwrap();
        assert_eq!(m.delta, 100.0);
        assert!((m.abs_rel - 0.2).abs() < 1e-12);
        assert!(depth_metrics(&map(&[1.0]), &map(&[0.0])).is_err());
    }

    #[test]
    fn correlation_and_direction() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - 4.5 / (61.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 2.0], &[-1.0, -2.0]), Some(-1.0));
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]), None);
        // Rounding noise around a constant is still constant.
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[0.1, 0.1 + 1e-17, 0.1 - 1e-17]), None);
        let a = PoseSE3::from_translation([1.0, 0.0, 0.0]);
        let b = PoseSE3::from_translation([0.0, 2.0, 0.0]);
        assert!((translation_direction_error(&a, &b).unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(translation_direction_error(&a, &a), Some(0.0));
        assert_eq!(translation_direction_error(&a, &PoseSE3::identity()), None);
    }

    fn trajectory(n: usize) -> Vec<PoseSE3> {
        (0..n)
            .map(|i| {
                let t = i as f64;
                PoseSE3::new([0.01 * t, -0.02 * t, 0.005 * t], [t, 0.5 * t * t, -0.3 * t])
            })
            .collect()
    }

    #[test]
    fn ate_examples() {
        let gt = trajectory(7);
        let r = ate_5frame(&gt, &gt).unwrap();
        assert_eq!(r.per_snippet.len(), 3);
        assert!(r.mean.abs() < 1e-12);
        let doubled: Vec<_> = gt
            .iter()
            .map(|p| PoseSE3::new(p.euler, p.translation.map(|v| 2.0 * v)))
            .collect();
        let r = ate_5frame(&doubled, &gt).unwrap();
        assert!(r.mean < 1e-12);
        assert!(r.scales.iter().all(|s| (s - 0.5).abs() < 1e-12));
        assert!(ate_5frame(&gt[..4], &gt[..4]).is_err());
    }
}
