//! Pinhole camera, rigid motion and rigid flow.
//!
//! A target pixel `p` with depth `D(p)` is lifted to `D(p) K⁻¹ h(p)`, moved into
//! the source camera by the relative motion `M = (R, t)` and projected back with
//! `K`. The displacement between the projected and the original pixel is the
//! rigid flow. Rotations use intrinsic X, then Y, then Z Euler angles
//! (`R = Rx(a) Ry(b) Rz(c)`), translations are in millimeters and `h(p)` is
//! `(u, v, 1)` with pixel centers at integer coordinates.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthMap, ImageBuffer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Intrinsics of a 2x2-average-pooled image: pooled pixel `i` covers
    /// full-resolution pixels `2i` and `2i + 1`, so its center is at `2i + 0.5`.
    pub fn halved(&self) -> Self {
        Self {
            fx: self.fx / 2.0,
            fy: self.fy / 2.0,
            cx: (self.cx - 0.5) / 2.0,
            cy: (self.cy - 0.5) / 2.0,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    pub fn at_level(&self, level: usize) -> Self {
        (0..level).fold(*self, |k, _| k.halved())
    }

    /// `K⁻¹ h(p)`, the viewing ray through pixel `(u, v)` with unit z.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        [
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(b: f64) -> Matrix3<f64> {
    let (s, c) = b.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(g: f64) -> Matrix3<f64> {
    let (s, c) = g.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(b: f64) -> Matrix3<f64> {
    let (s, c) = b.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(g: f64) -> Matrix3<f64> {
    let (s, c) = g.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `Rx(a) Ry(b) Rz(c)` for `euler = [a, b, c]`.
pub fn euler_to_matrix(euler: [f64; 3]) -> Matrix3<f64> {
    rot_x(euler[0]) * rot_y(euler[1]) * rot_z(euler[2])
}

/// Partial derivatives of [`euler_to_matrix`] with respect to each angle.
pub fn euler_matrix_derivatives(euler: [f64; 3]) -> [Matrix3<f64>; 3] {
    let (rx, ry, rz) = (rot_x(euler[0]), rot_y(euler[1]), rot_z(euler[2]));
    [
        d_rot_x(euler[0]) * ry * rz,
        rx * d_rot_y(euler[1]) * rz,
        rx * ry * d_rot_z(euler[2]),
    ]
}

/// Inverse of [`euler_to_matrix`]. At gimbal lock (`|b| = π/2`) the first
/// angle is set to zero and the remaining freedom goes to the third.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> [f64; 3] {
    let sb = r[(0, 2)].clamp(-1.0, 1.0);
    let b = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
        let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
        [a, b, c]
    } else {
        // Rx(0) Ry(±π/2) Rz(c): r[(1,0)] = sin c, r[(1,1)] = cos c.
        let c = r[(1, 0)].atan2(r[(1, 1)]);
        [0.0, b, c]
    }
}

/// Relative rigid motion `x' = R x + t`, rotation stored as Euler angles
/// (radians) and translation in millimeters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub euler: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(euler: [f64; 3], translation: [f64; 3]) -> Self {
        Self { euler, translation }
    }

    pub fn from_translation(translation: [f64; 3]) -> Self {
        Self {
            euler: [0.0; 3],
            translation,
        }
    }

    pub fn from_rt(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        Self {
            euler: matrix_to_euler(r),
            translation: [t.x, t.y, t.z],
        }
    }

    /// `[rx, ry, rz, tx, ty, tz]`.
    pub fn to_vector(&self) -> [f64; 6] {
        let [a, b, c] = self.euler;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z]
    }

    pub fn from_vector(v: [f64; 6]) -> Self {
        Self {
            euler: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_to_matrix(self.euler)
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation_vector()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        Self::from_rt(&rt, &(-(rt * self.translation_vector())))
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        let r = self.rotation();
        Self::from_rt(
            &(r * other.rotation()),
            &(r * other.translation_vector() + self.translation_vector()),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Per-pixel 3D points in the camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

/// Per-pixel displacement in pixels, with an explicit validity flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowField2D {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowField2D {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::uniform(width, height, [0.0, 0.0])
    }

    pub fn uniform(width: usize, height: usize, d: [f64; 2]) -> Self {
        Self {
            width,
            height,
            vectors: vec![d; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 2]) -> Self {
        let mut vectors = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                vectors.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            vectors,
            valid: vec![true; width * height],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Absolute sampling coordinates `p + flow(p)`.
    pub fn target_coords(&self) -> Vec<[f64; 2]> {
        self.vectors
            .iter()
            .enumerate()
            .map(|(i, d)| {
                [
                    (i % self.width) as f64 + d[0],
                    (i / self.width) as f64 + d[1],
                ]
            })
            .collect()
    }

    pub fn mean_vector(&self) -> [f64; 2] {
        let n = self.vectors.len() as f64;
        let s = self
            .vectors
            .iter()
            .fold([0.0, 0.0], |a, d| [a[0] + d[0], a[1] + d[1]]);
        [s[0] / n, s[1] / n]
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.vectors.iter().map(|d| d[0].hypot(d[1])).sum::<f64>() / self.vectors.len() as f64
    }

    /// Two-channel raster `(du, dv)`.
    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::from_fn(self.width, self.height, 2, |x, y, c| {
            self.vectors[y * self.width + x][c]
        })
    }

    pub fn from_image(img: &ImageBuffer) -> Result<Self> {
        if img.channels() < 2 {
            return Err(Error::Shape("flow raster needs two channels".into()));
        }
        Ok(Self::from_fn(img.width(), img.height(), |x, y| {
            [img.get(x, y, 0), img.get(x, y, 1)]
        }))
    }
}

/// Per-pixel target coordinates from [`project`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<[f64; 2]>,
    /// Point in front of the camera.
    pub valid: Vec<bool>,
    /// Valid and inside `[0, W-1] x [0, H-1]`.
    pub in_view: Vec<bool>,
}

fn check_depth_shape(depth: &DepthMap, k: &Intrinsics) -> Result<()> {
    if depth.width() != k.width || depth.height() != k.height || depth.channels() != 1 {
        return Err(Error::Shape(format!(
            "depth {}x{}x{} does not match camera {}x{}",
            depth.width(),
            depth.height(),
            depth.channels(),
            k.width,
            k.height
        )));
    }
    Ok(())
}

/// Lifts every pixel to `D(p) K⁻¹ h(p)`. Non-positive or non-finite depths
/// produce invalid points.
pub fn backproject(depth: &DepthMap, k: &Intrinsics) -> Result<PointCloud> {
    check_depth_shape(depth, k)?;
    let (w, h) = (k.width, k.height);
    let mut points = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d = depth.get(x, y, 0);
            let ok = d > 0.0 && d.is_finite();
            points.push(if ok {
                k.ray(x as f64, y as f64) * d
            } else {
                Vector3::zeros()
            });
            valid.push(ok);
        }
    }
    Ok(PointCloud {
        width: w,
        height: h,
        points,
        valid,
    })
}

pub fn transform_points(cloud: &PointCloud, pose: &PoseSE3) -> PointCloud {
    let r = pose.rotation();
    let t = pose.translation_vector();
    let points: Vec<_> = cloud.points.iter().map(|p| r * p + t).collect();
    let valid = cloud
        .valid
        .iter()
        .zip(&points)
        .map(|(&v, p)| v && p.z > 0.0)
        .collect();
    PointCloud {
        width: cloud.width,
        height: cloud.height,
        points,
        valid,
    }
}

pub fn project(cloud: &PointCloud, k: &Intrinsics) -> Projection {
    let (wmax, hmax) = ((k.width - 1) as f64, (k.height - 1) as f64);
    let mut coords = Vec::with_capacity(cloud.points.len());
    let mut valid = Vec::with_capacity(cloud.points.len());
    let mut in_view = Vec::with_capacity(cloud.points.len());
    for (p, &v) in cloud.points.iter().zip(&cloud.valid) {
        let ok = v && p.z > 0.0 && p.x.is_finite() && p.y.is_finite() && p.z.is_finite();
        let c = if ok { k.project(p) } else { [f64::NAN; 2] };
        let inside = ok && (0.0..=wmax).contains(&c[0]) && (0.0..=hmax).contains(&c[1]);
        coords.push(if ok { c } else { [0.0, 0.0] });
        valid.push(ok);
        in_view.push(inside);
    }
    Projection {
        width: cloud.width,
        height: cloud.height,
        coords,
        valid,
        in_view,
    }
}

/// Rigid flow `p^{s→t} − p^t` induced by target depth and the target-to-source
/// motion. Invalid pixels carry zero displacement and `valid = false`.
pub fn rigid_flow(depth: &DepthMap, pose: &PoseSE3, k: &Intrinsics) -> Result<FlowField2D> {
    let cloud = transform_points(&backproject(depth, k)?, pose);
    let proj = project(&cloud, k);
    let w = k.width;
    let vectors = proj
        .coords
        .iter()
        .zip(&proj.valid)
        .enumerate()
        .map(|(i, (c, &ok))| {
            if ok {
                [c[0] - (i % w) as f64, c[1] - (i / w) as f64]
            } else {
                [0.0, 0.0]
            }
        })
        .collect();
    Ok(FlowField2D {
        width: w,
        height: k.height,
        vectors,
        valid: proj.valid,
    })
}

/// Derivatives of one pixel's rigid-flow displacement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowJacobian {
    /// `∂(du, dv)/∂ log D`.
    pub log_depth: [f64; 2],
    /// `∂(du, dv)/∂[rx, ry, rz, tx, ty, tz]`, one row per flow component.
    pub pose: [[f64; 6]; 2],
}

struct JacobianContext {
    r: Matrix3<f64>,
    dr: [Matrix3<f64>; 3],
    t: Vector3<f64>,
}

impl JacobianContext {
    fn new(pose: &PoseSE3) -> Self {
        Self {
            r: pose.rotation(),
            dr: euler_matrix_derivatives(pose.euler),
            t: pose.translation_vector(),
        }
    }

    #[inline]
    fn pixel(&self, k: &Intrinsics, x: usize, y: usize, d: f64) -> Option<FlowJacobian> {
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        let p = k.ray(x as f64, y as f64) * d;
        let rp = self.r * p;
        let q = rp + self.t;
        if q.z <= 0.0 {
            return None;
        }
        let iz = 1.0 / q.z;
        // Rows of ∂(u', v')/∂q.
        let du = Vector3::new(k.fx * iz, 0.0, -k.fx * q.x * iz * iz);
        let dv = Vector3::new(0.0, k.fy * iz, -k.fy * q.y * iz * iz);
        let mut pose = [[0.0; 6]; 2];
        for a in 0..3 {
            let dq = self.dr[a] * p;
            pose[0][a] = du.dot(&dq);
            pose[1][a] = dv.dot(&dq);
        }
        for a in 0..3 {
            pose[0][3 + a] = du[a];
            pose[1][3 + a] = dv[a];
        }
        Some(FlowJacobian {
            log_depth: [du.dot(&rp), dv.dot(&rp)],
            pose,
        })
    }
}

/// Analytic per-pixel Jacobians of [`rigid_flow`]; `None` for invalid pixels.
pub fn rigid_flow_jacobians(
    depth: &DepthMap,
    pose: &PoseSE3,
    k: &Intrinsics,
) -> Result<Vec<Option<FlowJacobian>>> {
    check_depth_shape(depth, k)?;
    let ctx = JacobianContext::new(pose);
    Ok((0..k.width * k.height)
        .map(|i| ctx.pixel(k, i % k.width, i / k.width, depth.data()[i]))
        .collect())
}

/// Pulls a per-pixel flow gradient back onto log-depth and the pose vector.
pub fn rigid_flow_vjp(
    depth: &DepthMap,
    pose: &PoseSE3,
    k: &Intrinsics,
    grad_flow: &[[f64; 2]],
) -> Result<(ImageBuffer, [f64; 6])> {
    check_depth_shape(depth, k)?;
    if grad_flow.len() != k.width * k.height {
        return Err(Error::Shape("flow gradient length".into()));
    }
    let ctx = JacobianContext::new(pose);
    let mut g_logd = ImageBuffer::new(k.width, k.height, 1);
    let mut g_pose = [0.0; 6];
    for (i, g) in grad_flow.iter().enumerate() {
        if g[0] == 0.0 && g[1] == 0.0 {
            continue;
        }
        if let Some(j) = ctx.pixel(k, i % k.width, i / k.width, depth.data()[i]) {
            g_logd.data_mut()[i] = g[0] * j.log_depth[0] + g[1] * j.log_depth[1];
            for a in 0..6 {
                g_pose[a] += g[0] * j.pose[0][a] + g[1] * j.pose[1][a];
            }
        }
    }
    Ok((g_logd, g_pose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn cam() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    #[test]
    fn euler_identity_and_quarter_turn() {
        assert_eq!(euler_to_matrix([0.0; 3]), Matrix3::identity());
        let r = euler_to_matrix([0.0, 0.0, FRAC_PI_2]);
        let e1 = r * Vector3::x();
        assert!((e1 - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn euler_matrices_are_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let e = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-3.0..3.0),
            ];
            let r = euler_to_matrix(e);
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            let back = euler_to_matrix(matrix_to_euler(&r));
            assert!((back - r).abs().max() < 1e-12);
        }
    }

    #[test]
    fn euler_derivatives_match_differences() {
        let e = [0.3, -0.2, 0.9];
        let d = euler_matrix_derivatives(e);
        for (a, da) in d.iter().enumerate() {
            let mut ep = e;
            let mut em = e;
            ep[a] += 1e-6;
            em[a] -= 1e-6;
            let fd = (euler_to_matrix(ep) - euler_to_matrix(em)) / 2e-6;
            assert!((fd - da).abs().max() < 1e-8);
        }
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let p = PoseSE3::from_vector(std::array::from_fn(|i| {
                if i < 3 {
                    rng.gen_range(-1.0..1.0)
                } else {
                    rng.gen_range(-50.0..50.0)
                }
            }));
            let id = p.compose(&p.inverse());
            assert!((id.rotation() - Matrix3::identity()).abs().max() < 1e-9);
            assert!(id.translation.iter().all(|t| t.abs() < 1e-9));
        }
    }

    #[test]
    fn backproject_principal_point_and_offset_pixel() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 160, 101).unwrap();
        let mut depth = ImageBuffer::filled(160, 101, 1, 70.0);
        depth.set(150, 50, 0, 200.0);
        let cloud = backproject(&depth, &k).unwrap();
        assert_eq!(cloud.points[50 * 160 + 50], Vector3::new(0.0, 0.0, 70.0));
        assert_eq!(cloud.points[50 * 160 + 150], Vector3::new(200.0, 0.0, 200.0));
        assert!(cloud.points.iter().zip(depth.data()).all(|(p, &d)| p.z == d));
        assert_eq!(k.project(&Vector3::new(200.0, 0.0, 200.0))[0], 150.0);
        assert_eq!(k.project(&Vector3::new(0.0, 0.0, 3.0)), [50.0, 50.0]);
    }

    #[test]
    fn nonpositive_depth_is_invalid() {
        let k = cam();
        let mut depth = ImageBuffer::filled(101, 101, 1, 10.0);
        depth.set(3, 4, 0, 0.0);
        depth.set(5, 4, 0, -1.0);
        let cloud = backproject(&depth, &k).unwrap();
        assert!(!cloud.valid[4 * 101 + 3]);
        assert!(!cloud.valid[4 * 101 + 5]);
        assert!(cloud.valid[0]);
    }

    #[test]
    fn project_flags_degenerate_and_out_of_view() {
        let k = cam();
        let cloud = PointCloud {
            width: 3,
            height: 1,
            points: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1000.0, 0.0, 1.0),
                Vector3::new(0.0, 0.0, 5.0),
            ],
            valid: vec![true; 3],
        };
        let pr = project(&cloud, &k);
        assert_eq!(pr.valid, vec![false, true, true]);
        assert_eq!(pr.in_view, vec![false, false, true]);
        assert_eq!(pr.coords[2], [50.0, 50.0]);
    }

    #[test]
    fn round_trip_identity_pose() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let depth = ImageBuffer::from_fn(101, 101, 1, |_, _, _| rng.gen_range(1.0..500.0));
        let pr = project(&transform_points(&backproject(&depth, &k).unwrap(), &PoseSE3::identity()), &k);
        for (i, c) in pr.coords.iter().enumerate() {
            assert!((c[0] - (i % 101) as f64).abs() < 1e-9);
            assert!((c[1] - (i / 101) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn transform_translation_and_inverse() {
        let k = cam();
        let depth = ImageBuffer::filled(101, 101, 1, 40.0);
        let cloud = backproject(&depth, &k).unwrap();
        let moved = transform_points(&cloud, &PoseSE3::from_translation([0.0, 0.0, 10.0]));
        assert!(moved.points.iter().all(|p| p.z == 50.0));
        let pose = PoseSE3::new([0.1, -0.05, 0.2], [3.0, -2.0, 1.0]);
        let back = transform_points(&transform_points(&cloud, &pose), &pose.inverse());
        for (a, b) in back.points.iter().zip(&cloud.points) {
            assert!((a - b).norm() < 1e-9);
        }
        assert_eq!(transform_points(&cloud, &PoseSE3::identity()), cloud);
    }

    #[test]
    fn identity_pose_gives_zero_flow() {
        let k = cam();
        let depth = ImageBuffer::from_fn(101, 101, 1, |x, y, _| 20.0 + (x + 2 * y) as f64);
        let f = rigid_flow(&depth, &PoseSE3::identity(), &k).unwrap();
        assert!(f.vectors.iter().all(|d| d[0].abs() < 1e-12 && d[1].abs() < 1e-12));
    }

    #[test]
    fn lateral_translation_gives_uniform_flow() {
        let k = cam();
        let d = 80.0;
        let tx = 4.0;
        let depth = ImageBuffer::filled(101, 101, 1, d);
        let f = rigid_flow(&depth, &PoseSE3::from_translation([tx, 0.0, 0.0]), &k).unwrap();
        for v in &f.vectors {
            assert!((v[0] - k.fx * tx / d).abs() < 1e-9);
            assert!(v[1].abs() < 1e-9);
        }
    }

    #[test]
    fn forward_translation_gives_radial_flow() {
        let k = cam();
        let d = 100.0;
        let tz = -10.0; // scene moves toward the camera
        let depth = ImageBuffer::filled(101, 101, 1, d);
        let f = rigid_flow(&depth, &PoseSE3::from_translation([0.0, 0.0, tz]), &k).unwrap();
        for (i, v) in f.vectors.iter().enumerate() {
            let (x, y) = ((i % 101) as f64 - 50.0, (i / 101) as f64 - 50.0);
            // u' - cx = (x) d / (d + tz)
            let s = d / (d + tz) - 1.0;
            assert!((v[0] - s * x).abs() < 1e-9);
            assert!((v[1] - s * y).abs() < 1e-9);
        }
        assert_eq!(f.vectors[50 * 101 + 50], [0.0, 0.0]);
    }

    #[test]
    fn flow_is_invariant_to_joint_depth_translation_scaling() {
        let k = cam();
        let depth = ImageBuffer::from_fn(101, 101, 1, |x, y, _| 30.0 + 0.3 * x as f64 + 0.1 * y as f64);
        let pose = PoseSE3::new([0.02, -0.01, 0.03], [2.0, 1.0, -3.0]);
        let f1 = rigid_flow(&depth, &pose, &k).unwrap();
        for s in [0.25, 3.0, 17.0] {
            let scaled = depth.map(|d| d * s);
            let mut p2 = pose;
            p2.translation = pose.translation.map(|t| t * s);
            let f2 = rigid_flow(&scaled, &p2, &k).unwrap();
            for (a, b) in f1.vectors.iter().zip(&f2.vectors) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn flow_vjp_matches_jacobians() {
        let k = Intrinsics::new(20.0, 22.0, 7.5, 6.0, 16, 12).unwrap();
        let depth = ImageBuffer::from_fn(16, 12, 1, |x, y, _| 30.0 + x as f64 - 0.5 * y as f64);
        let pose = PoseSE3::new([0.05, 0.02, -0.03], [1.0, -0.5, 2.0]);
        let jac = rigid_flow_jacobians(&depth, &pose, &k).unwrap();
        let grads: Vec<[f64; 2]> = (0..192).map(|i| [(i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
        let (gl, gp) = rigid_flow_vjp(&depth, &pose, &k, &grads).unwrap();
        let mut expect_pose = [0.0; 6];
        for (i, j) in jac.iter().enumerate() {
            let j = j.unwrap();
            let g = grads[i];
            assert!((gl.data()[i] - (g[0] * j.log_depth[0] + g[1] * j.log_depth[1])).abs() < 1e-12);
            for a in 0..6 {
                expect_pose[a] += g[0] * j.pose[0][a] + g[1] * j.pose[1][a];
            }
        }
        for a in 0..6 {
            assert!((gp[a] - expect_pose[a]).abs() < 1e-9 * expect_pose[a].abs().max(1.0));
        }
    }

    #[test]
    fn halved_intrinsics_follow_pixel_centers() {
        let k = Intrinsics::new(100.0, 90.0, 63.5, 63.5, 128, 128).unwrap();
        let h = k.halved();
        assert_eq!((h.width, h.height), (64, 64));
        assert_eq!(h.cx, 31.5);
        // A point that projects to full-res pixel 2i + 0.5 lands on pooled pixel i.
        let p = Vector3::new(0.3, -0.2, 1.0);
        let full = k.project(&p);
        let half = h.project(&p);
        assert!((half[0] - (full[0] - 0.5) / 2.0).abs() < 1e-12);
        assert!((half[1] - (full[1] - 0.5) / 2.0).abs() < 1e-12);
    }
}
