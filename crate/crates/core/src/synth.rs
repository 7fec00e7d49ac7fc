//! Synthetic scenes with exact ground truth.
//!
//! Every pixel is rendered by intersecting its viewing ray with an analytic
//! surface and evaluating a procedural texture at the hit point, so source
//! views never involve resampling a raster. Coordinates are those of the
//! target camera, in millimeters.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField2D, Intrinsics, PoseSE3};
use crate::image::{DepthMap, ImageBuffer};
use crate::warping::bilinear_sample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    /// Spatial angular frequencies along X and Y (rad/mm).
    pub frequency: [f64; 2],
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    /// `Z = depth`.
    Plane { depth: f64 },
    /// `n · P = distance` with `n` normalized on use.
    InclinedPlane { normal: [f64; 3], distance: f64 },
    /// `Z = base + Σ a sin(fx X + fy Y + φ)`.
    HeightField { base: f64, components: Vec<Sinusoid> },
}

impl Surface {
    fn validate(&self) -> Result<()> {
        match self {
            Surface::Plane { depth } if !(*depth > 0.0) => {
                Err(Error::Scene(format!("plane depth {depth} must be positive")))
            }
            Surface::InclinedPlane { normal, distance } => {
                let n = Vector3::from(*normal);
                if !(n.norm() > 0.0) || !distance.is_finite() {
                    return Err(Error::Scene("inclined plane needs a nonzero normal".into()));
                }
                Ok(())
            }
            Surface::HeightField { base, components } => {
                let amp: f64 = components.iter().map(|c| c.amplitude.abs()).sum();
                if !(base - amp > 0.0) {
                    return Err(Error::Scene("height field reaches the camera plane".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn height(components: &[Sinusoid], x: f64, y: f64) -> f64 {
        components
            .iter()
            .map(|c| c.amplitude * (c.frequency[0] * x + c.frequency[1] * y + c.phase).sin())
            .sum()
    }

    /// Smallest positive ray parameter `λ` with `origin + λ dir` on the surface.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Surface::Plane { depth } => {
                let lambda = (depth - origin.z) / dir.z;
                (lambda > 0.0 && lambda.is_finite()).then_some(lambda)
            }
            Surface::InclinedPlane { normal, distance } => {
                let n = Vector3::from(*normal).normalize();
                let lambda = (distance - n.dot(origin)) / n.dot(dir);
                (lambda > 0.0 && lambda.is_finite()).then_some(lambda)
            }
            Surface::HeightField { base, components } => {
                if dir.z <= 0.0 {
                    return None;
                }
                let amp: f64 = components.iter().map(|c| c.amplitude.abs()).sum();
                let f = |l: f64| {
                    let p = origin + dir * l;
                    p.z - base - Self::height(components, p.x, p.y)
                };
                let lo = ((base - amp - origin.z) / dir.z).max(0.0);
                let hi = (base + amp - origin.z) / dir.z;
                if hi <= 0.0 {
                    return None;
                }
                // March to the first sign change so self-occlusion is honored,
                // then bisect.
                let steps = 256;
                let mut a = lo;
                let mut fa = f(a);
                if fa >= 0.0 {
                    return (a > 0.0).then_some(a);
                }
                for i in 1..=steps {
                    let b = lo + (hi - lo) * i as f64 / steps as f64;
                    let fb = f(b);
                    if fb >= 0.0 {
                        let (mut l, mut r) = (a, b);
                        for _ in 0..100 {
                            let m = 0.5 * (l + r);
                            if f(m) < 0.0 {
                                l = m;
                            } else {
                                r = m;
                            }
                            if r - l <= 1e-13 * r {
                                break;
                            }
                        }
                        return Some(0.5 * (l + r));
                    }
                    a = b;
                    fa = fb;
                }
                let _ = fa;
                None
            }
        }
    }
}

/// Procedural value noise: a seeded lattice of random values blended with a
/// quintic fade, summed over octaves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub seed: u64,
    /// Lattice spacing of the first octave in millimeters.
    pub cell_size: f64,
    pub octaves: usize,
    /// Mean intensity.
    pub mean: f64,
    /// Peak deviation from the mean. Zero gives a textureless scene.
    pub contrast: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            cell_size: 16.0,
            octaves: 2,
            mean: 0.45,
            contrast: 0.25,
        }
    }
}

fn hash(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = hash(seed ^ hash((ix as u64).wrapping_mul(0x1656_67b1) ^ hash(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

impl TextureSpec {
    fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || self.octaves == 0 {
            return Err(Error::Scene("texture needs a positive cell size and at least one octave".into()));
        }
        if self.mean - self.contrast < 0.0 || self.mean + self.contrast > 1.0 || self.contrast < 0.0 {
            return Err(Error::Scene("texture intensities must stay in [0, 1]".into()));
        }
        Ok(())
    }

    fn noise(seed: u64, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x.floor(), y.floor());
        let (ix, iy) = (fx as i64, fy as i64);
        let (tx, ty) = (fade(x - fx), fade(y - fy));
        let v00 = lattice(seed, ix, iy);
        let v10 = lattice(seed, ix + 1, iy);
        let v01 = lattice(seed, ix, iy + 1);
        let v11 = lattice(seed, ix + 1, iy + 1);
        let top = v00 + (v10 - v00) * tx;
        let bottom = v01 + (v11 - v01) * tx;
        top + (bottom - top) * ty
    }

    /// Intensity of channel `ch` at surface point `(x, y)`, in `[0, 1]`.
    pub fn eval(&self, x: f64, y: f64, ch: usize) -> f64 {
        let mut sum = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut scale = 1.0 / self.cell_size;
        for o in 0..self.octaves {
            let seed = hash(self.seed ^ hash((o as u64) << 8 | ch as u64));
            sum += amp * Self::noise(seed, x * scale, y * scale);
            norm += amp;
            amp *= 0.5;
            scale *= 2.0;
        }
        self.mean + self.contrast * sum / norm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub intrinsics: Intrinsics,
    pub surface: Surface,
    #[serde(default)]
    pub texture: TextureSpec,
    /// Target-to-source motions, one per source view.
    pub source_poses: Vec<PoseSE3>,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    3
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.surface.validate()?;
        self.texture.validate()?;
        if self.source_poses.is_empty() {
            return Err(Error::Scene("at least one source pose is required".into()));
        }
        if self.channels == 0 {
            return Err(Error::Scene("channels must be positive".into()));
        }
        Ok(())
    }
}

/// Rendered frames with ground truth on the target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub target: ImageBuffer,
    pub sources: Vec<ImageBuffer>,
    pub gt_depth: DepthMap,
    pub gt_poses: Vec<PoseSE3>,
    pub gt_flows: Vec<FlowField2D>,
}

fn render_view(
    scene: &SceneSpec,
    origin: Vector3<f64>,
    to_world: nalgebra::Matrix3<f64>,
) -> Result<(ImageBuffer, Vec<Vector3<f64>>)> {
    let k = &scene.intrinsics;
    let (w, h, c) = (k.width, k.height, scene.channels);
    let rows: Vec<Result<(Vec<f64>, Vec<Vector3<f64>>)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut pixels = Vec::with_capacity(w * c);
            let mut points = Vec::with_capacity(w);
            for x in 0..w {
                let dir = to_world * k.ray(x as f64, y as f64);
                let lambda = scene.surface.intersect(&origin, &dir).ok_or_else(|| {
                    Error::Scene(format!("ray through pixel ({x}, {y}) misses the surface in front of the camera"))
                })?;
                let p = origin + dir * lambda;
                for ch in 0..c {
                    pixels.push(scene.texture.eval(p.x, p.y, ch));
                }
                points.push(p);
            }
            Ok((pixels, points))
        })
        .collect();
    let mut data = Vec::with_capacity(w * h * c);
    let mut points = Vec::with_capacity(w * h);
    for r in rows {
        let (px, pt) = r?;
        data.extend(px);
        points.extend(pt);
    }
    Ok((ImageBuffer::from_vec(w, h, c, data)?, points))
}

/// Renders the target view and one source view per pose.
pub fn render(scene: &SceneSpec) -> Result<RenderedScene> {
    scene.validate()?;
    let k = &scene.intrinsics;
    let (target, points) = render_view(scene, Vector3::zeros(), nalgebra::Matrix3::identity())?;
    let gt_depth = ImageBuffer::from_vec(k.width, k.height, 1, points.iter().map(|p| p.z).collect())?;
    let mut sources = Vec::new();
    let mut gt_flows = Vec::new();
    for pose in &scene.source_poses {
        let r = pose.rotation();
        let t = pose.translation_vector();
        // Source camera center and axes expressed in the target frame.
        let origin = -(r.transpose() * t);
        let (img, _) = render_view(scene, origin, r.transpose())?;
        sources.push(img);
        let mut vectors = Vec::with_capacity(points.len());
        for p in points.iter() {
            let q = r * p + t;
            if q.z <= 0.0 {
                return Err(Error::Scene("surface behind the source camera".into()));
            }
            // Difference of two projections, so an identity motion gives
            // exactly zero flow.
            let (a, b) = (k.project(&q), k.project(p));
            vectors.push([a[0] - b[0], a[1] - b[1]]);
        }
        gt_flows.push(FlowField2D {
            width: k.width,
            height: k.height,
            valid: vec![true; vectors.len()],
            vectors,
        });
    }
    Ok(RenderedScene {
        target,
        sources,
        gt_depth,
        gt_poses: scene.source_poses.clone(),
        gt_flows,
    })
}

/// [`render`] restricted to a single source view.
pub fn render_pair(scene: &SceneSpec) -> Result<RenderedScene> {
    if scene.source_poses.len() != 1 {
        return Err(Error::Scene("a pair needs exactly one source pose".into()));
    }
    render(scene)
}

/// Radiometric perturbation of a rendered frame. Positions are in pixels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum IlluminationSpec {
    #[default]
    None,
    /// `gain · I + bias`.
    Affine { gain: f64, bias: f64 },
    /// `I · (1 − strength · (r / r_max)^exponent)`, `r_max` the image
    /// half-diagonal.
    RadialFalloff {
        center: [f64; 2],
        strength: f64,
        exponent: f64,
    },
    /// `I + peak · exp(−r² / radius²)`.
    SpecularSpot { center: [f64; 2], radius: f64, peak: f64 },
    /// Applied in order, without intermediate clamping.
    Composite { parts: Vec<IlluminationSpec> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Illuminated {
    pub image: ImageBuffer,
    /// Pre-clamp additive change `I' − I`.
    pub change: ImageBuffer,
    /// Pixels where any channel was clamped to `[0, 1]`.
    pub clamped: Vec<bool>,
}

impl IlluminationSpec {
    fn perturb(&self, value: f64, x: f64, y: f64, half_diagonal: f64) -> f64 {
        match self {
            IlluminationSpec::None => value,
            IlluminationSpec::Affine { gain, bias } => gain * value + bias,
            IlluminationSpec::RadialFalloff {
                center,
                strength,
                exponent,
            } => {
                let r = ((x - center[0]).powi(2) + (y - center[1]).powi(2)).sqrt();
                value * (1.0 - strength * (r / half_diagonal).powf(*exponent))
            }
            IlluminationSpec::SpecularSpot { center, radius, peak } => {
                let r2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
                value + peak * (-r2 / (radius * radius)).exp()
            }
            IlluminationSpec::Composite { parts } => parts
                .iter()
                .fold(value, |v, p| p.perturb(v, x, y, half_diagonal)),
        }
    }
}

pub fn apply_illumination(image: &ImageBuffer, spec: &IlluminationSpec) -> Illuminated {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    if *spec == IlluminationSpec::None {
        return Illuminated {
            image: image.clone(),
            change: ImageBuffer::new(w, h, c),
            clamped: vec![false; w * h],
        };
    }
    let half_diagonal = 0.5 * (((w * w + h * h) as f64).sqrt());
    let perturbed = ImageBuffer::from_fn(w, h, c, |x, y, ch| {
        spec.perturb(image.get(x, y, ch), x as f64, y as f64, half_diagonal)
    });
    let change = perturbed.zip_map(image, |a, b| a - b).expect("same shape");
    let clamped = (0..w * h)
        .map(|p| perturbed.pixel(p).iter().any(|v| !(0.0..=1.0).contains(v)))
        .collect();
    Illuminated {
        image: perturbed.map(|v| v.clamp(0.0, 1.0)),
        change,
        clamped,
    }
}

/// Brightness change of a source view expressed on the target grid: the
/// change map sampled where the ground-truth flow lands, which is the offset
/// field that makes the perturbed synthesized view equal `I^t + C_δ`.
pub fn target_brightness_change(change: &ImageBuffer, gt_flow: &FlowField2D) -> Result<ImageBuffer> {
    bilinear_sample(change, &gt_flow.target_coords(), gt_flow.width, gt_flow.height)
}

/// Target pixels whose bilinear footprint in the source touches a clamped
/// pixel.
pub fn clamped_footprint(clamped: &[bool], gt_flow: &FlowField2D) -> Vec<bool> {
    let (w, h) = (gt_flow.width, gt_flow.height);
    gt_flow
        .target_coords()
        .iter()
        .map(|c| {
            let x0 = c[0].floor().clamp(0.0, (w - 1) as f64) as usize;
            let y0 = c[1].floor().clamp(0.0, (h - 1) as f64) as usize;
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            clamped[y0 * w + x0] || clamped[y0 * w + x1] || clamped[y1 * w + x0] || clamped[y1 * w + x1]
        })
        .collect()
}

/// A fronto-parallel textured plane viewed by a square camera with the
/// principal point at the image center.
pub fn plane_scene(size: usize, focal: f64, depth: f64, poses: Vec<PoseSE3>, texture: TextureSpec) -> Result<SceneSpec> {
    let c = (size as f64 - 1.0) / 2.0;
    Ok(SceneSpec {
        intrinsics: Intrinsics::new(focal, focal, c, c, size, size)?,
        surface: Surface::Plane { depth },
        texture,
        source_poses: poses,
        channels: 3,
    })
}
