//! Differentiable bilinear sampling, flow-driven view synthesis and the
//! range-map occlusion check.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::FlowField2D;
use crate::image::ImageBuffer;

/// Default range-map threshold separating visible from occluded pixels.
pub const VISIBILITY_THRESHOLD: f64 = 0.95;

#[inline]
fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Integer corners and fractional weights of one bilinear lookup under
/// border replication.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

#[inline]
fn stencil(w: usize, h: usize, x: f64, y: f64) -> Stencil {
    let xf = x.floor();
    let yf = y.floor();
    let (xi, yi) = (xf as i64, yf as i64);
    Stencil {
        x0: clamp_index(xi, w),
        x1: clamp_index(xi + 1, w),
        y0: clamp_index(yi, h),
        y1: clamp_index(yi + 1, h),
        fx: x - xf,
        fy: y - yf,
    }
}

fn check_coords(source: &ImageBuffer, coords: &[[f64; 2]], out_pixels: usize) -> Result<()> {
    if coords.len() != out_pixels {
        return Err(Error::Shape(format!(
            "{} coordinates for {} output pixels",
            coords.len(),
            out_pixels
        )));
    }
    if source.width() == 0 || source.height() == 0 {
        return Err(Error::Shape("empty source image".into()));
    }
    Ok(())
}

/// Samples `source` at per-pixel coordinates. The output has `width x height`
/// pixels (the coordinate grid) and the source's channel count. Coordinates
/// outside the image replicate the border.
pub fn bilinear_sample(
    source: &ImageBuffer,
    coords: &[[f64; 2]],
    width: usize,
    height: usize,
) -> Result<ImageBuffer> {
    check_coords(source, coords, width * height)?;
    let (sw, sh, c) = (source.width(), source.height(), source.channels());
    let src = source.data();
    let mut out = vec![0.0; width * height * c];
    out.par_chunks_mut(width * c)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..width {
                let [u, v] = coords[y * width + x];
                let s = stencil(sw, sh, u, v);
                let (w00, w10) = ((1.0 - s.fx) * (1.0 - s.fy), s.fx * (1.0 - s.fy));
                let (w01, w11) = ((1.0 - s.fx) * s.fy, s.fx * s.fy);
                let i00 = (s.y0 * sw + s.x0) * c;
                let i10 = (s.y0 * sw + s.x1) * c;
                let i01 = (s.y1 * sw + s.x0) * c;
                let i11 = (s.y1 * sw + s.x1) * c;
                for ch in 0..c {
                    row[x * c + ch] = w00 * src[i00 + ch]
                        + w10 * src[i10 + ch]
                        + w01 * src[i01 + ch]
                        + w11 * src[i11 + ch];
                }
            }
        });
    ImageBuffer::from_vec(width, height, c, out)
}

/// Adjoint of [`bilinear_sample`]: gradients with respect to the source
/// intensities and to each sampling coordinate.
pub fn bilinear_sample_vjp(
    source: &ImageBuffer,
    coords: &[[f64; 2]],
    grad_out: &ImageBuffer,
) -> Result<(ImageBuffer, Vec<[f64; 2]>)> {
    let (width, height) = (grad_out.width(), grad_out.height());
    check_coords(source, coords, width * height)?;
    if grad_out.channels() != source.channels() {
        return Err(Error::Shape("gradient channel count".into()));
    }
    let (sw, sh, c) = (source.width(), source.height(), source.channels());
    let src = source.data();
    let g = grad_out.data();
    let mut grad_src = ImageBuffer::new(sw, sh, c);
    let gs = grad_src.data_mut();
    let mut grad_coords = vec![[0.0; 2]; width * height];
    for (i, gc) in grad_coords.iter_mut().enumerate() {
        let [u, v] = coords[i];
        let s = stencil(sw, sh, u, v);
        let i00 = (s.y0 * sw + s.x0) * c;
        let i10 = (s.y0 * sw + s.x1) * c;
        let i01 = (s.y1 * sw + s.x0) * c;
        let i11 = (s.y1 * sw + s.x1) * c;
        let (w00, w10) = ((1.0 - s.fx) * (1.0 - s.fy), s.fx * (1.0 - s.fy));
        let (w01, w11) = ((1.0 - s.fx) * s.fy, s.fx * s.fy);
        let mut du = 0.0;
        let mut dv = 0.0;
        for ch in 0..c {
            let go = g[i * c + ch];
            if go == 0.0 {
                continue;
            }
            let (a, b, cc, d) = (src[i00 + ch], src[i10 + ch], src[i01 + ch], src[i11 + ch]);
            du += go * ((1.0 - s.fy) * (b - a) + s.fy * (d - cc));
            dv += go * ((1.0 - s.fx) * (cc - a) + s.fx * (d - b));
            gs[i00 + ch] += go * w00;
            gs[i10 + ch] += go * w10;
            gs[i01 + ch] += go * w01;
            gs[i11 + ch] += go * w11;
        }
        *gc = [du, dv];
    }
    Ok((grad_src, grad_coords))
}

/// `I^{s→t}(p) = I^s(p + flow(p))`.
pub fn synthesize_view(source: &ImageBuffer, flow: &FlowField2D) -> Result<ImageBuffer> {
    bilinear_sample(source, &flow.target_coords(), flow.width, flow.height)
}

/// Forward-splatted occupancy of a backward flow.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeMap(pub ImageBuffer);

impl RangeMap {
    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn total_mass(&self) -> f64 {
        self.0.data().iter().sum()
    }
}

/// Tent weight `max(0, 1 − |a − b|)`.
#[inline]
pub fn tent(a: f64, b: f64) -> f64 {
    (1.0 - (a - b).abs()).max(0.0)
}

/// `R(u, v) = Σ_{i,j} max(0, 1 − |u − (i + Fu)|) · max(0, 1 − |v − (j + Fv)|)`,
/// evaluated by letting each flowed pixel splat bilinear mass onto its (at
/// most four) neighbors. Pixels with an invalid flow do not splat.
pub fn range_map(backward_flow: &FlowField2D) -> RangeMap {
    let (w, h) = (backward_flow.width, backward_flow.height);
    let mut r = ImageBuffer::new(w, h, 1);
    let acc = r.data_mut();
    for j in 0..h {
        for i in 0..w {
            let idx = j * w + i;
            if !backward_flow.valid[idx] {
                continue;
            }
            let [fu, fv] = backward_flow.vectors[idx];
            let (x, y) = (i as f64 + fu, j as f64 + fv);
            let (x0, y0) = (x.floor(), y.floor());
            for v in [y0, y0 + 1.0] {
                if v < 0.0 || v >= h as f64 {
                    continue;
                }
                let kv = tent(v, y);
                for u in [x0, x0 + 1.0] {
                    if u < 0.0 || u >= w as f64 {
                        continue;
                    }
                    let ku = tent(u, x);
                    acc[v as usize * w + u as usize] += ku * kv;
                }
            }
        }
    }
    RangeMap(r)
}

/// Boolean per-pixel gate.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMask {
    pub width: usize,
    pub height: usize,
    pub visible: Vec<bool>,
}

impl VisibilityMask {
    pub fn all_visible(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            visible: vec![true; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.visible.len() as f64
    }

    /// Logical AND with per-pixel flags of the same length.
    pub fn and(&self, other: &[bool]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            visible: self.visible.iter().zip(other).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::from_vec(
            self.width,
            self.height,
            1,
            self.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape")
    }

    pub fn from_image(img: &ImageBuffer) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            visible: img.data().chunks(img.channels()).map(|p| p[0] > 0.5).collect(),
        }
    }
}

/// `V = R > threshold` (strict).
pub fn visibility_mask(range: &RangeMap, threshold: f64) -> VisibilityMask {
    VisibilityMask {
        width: range.0.width(),
        height: range.0.height(),
        visible: range.0.data().iter().map(|&r| r > threshold).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(w: usize, h: usize) -> Vec<[f64; 2]> {
        (0..w * h).map(|i| [(i % w) as f64, (i / w) as f64]).collect()
    }

    #[test]
    fn integer_coordinates_return_source_values() {
        let img = ImageBuffer::from_fn(5, 4, 3, |x, y, c| (x * 7 + y * 3 + c) as f64 * 0.01);
        let out = bilinear_sample(&img, &grid(5, 4), 5, 4).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn center_of_two_by_two_is_average() {
        let img = ImageBuffer::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = bilinear_sample(&img, &[[0.5, 0.5]], 1, 1).unwrap();
        assert_eq!(out.data()[0], 2.5);
    }

    #[test]
    fn constants_are_preserved_anywhere() {
        let img = ImageBuffer::filled(6, 5, 2, 0.37);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coords: Vec<_> = (0..30)
            .map(|_| [rng.gen_range(-10.0..15.0), rng.gen_range(-10.0..15.0)])
            .collect();
        let out = bilinear_sample(&img, &coords, 6, 5).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn zero_flow_is_identity_and_unit_shift_moves_ramp() {
        let ramp = ImageBuffer::from_fn(6, 3, 1, |x, _, _| x as f64 / 5.0);
        assert_eq!(synthesize_view(&ramp, &FlowField2D::zeros(6, 3)).unwrap(), ramp);
        let shifted = synthesize_view(&ramp, &FlowField2D::uniform(6, 3, [1.0, 0.0])).unwrap();
        for y in 0..3 {
            for x in 0..6 {
                let expect = ramp.get((x + 1).min(5), y, 0);
                assert_eq!(shifted.get(x, y, 0), expect);
            }
        }
    }

    #[test]
    fn sample_vjp_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = ImageBuffer::from_fn(7, 6, 2, |_, _, _| rng.gen_range(0.0..1.0));
        let coords: Vec<[f64; 2]> = (0..12)
            .map(|_| [rng.gen_range(0.1..5.9), rng.gen_range(0.1..4.9)])
            .map(|c: [f64; 2]| {
                // keep away from integer kinks
                [c[0].floor() + 0.2 + 0.6 * c[0].fract(), c[1].floor() + 0.2 + 0.6 * c[1].fract()]
            })
            .collect();
        let gout = ImageBuffer::from_fn(4, 3, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let loss = |img: &ImageBuffer, coords: &[[f64; 2]]| -> f64 {
            let s = bilinear_sample(img, coords, 4, 3).unwrap();
            s.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum()
        };
        let (gs, gc) = bilinear_sample_vjp(&img, &coords, &gout).unwrap();
        let eps = 1e-6;
        for i in 0..coords.len() {
            for a in 0..2 {
                let mut cp = coords.clone();
                let mut cm = coords.clone();
                cp[i][a] += eps;
                cm[i][a] -= eps;
                let fd = (loss(&img, &cp) - loss(&img, &cm)) / (2.0 * eps);
                assert!((fd - gc[i][a]).abs() < 1e-7, "coord {i}/{a}: {fd} vs {}", gc[i][a]);
            }
        }
        for k in 0..img.data().len() {
            let mut ip = img.clone();
            let mut im = img.clone();
            ip.data_mut()[k] += eps;
            im.data_mut()[k] -= eps;
            let fd = (loss(&ip, &coords) - loss(&im, &coords)) / (2.0 * eps);
            assert!((fd - gs.data()[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_flow_range_is_one() {
        let r = range_map(&FlowField2D::zeros(5, 4));
        assert!(r.values().iter().all(|&v| v == 1.0));
        assert!(visibility_mask(&r, VISIBILITY_THRESHOLD).visible.iter().all(|&v| v));
    }

    #[test]
    fn out_of_bounds_flow_leaves_empty_range() {
        let r = range_map(&FlowField2D::uniform(5, 4, [100.0, -50.0]));
        assert!(r.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_pixels_landing_on_one_target() {
        // Pixel (0,0) moves one column right onto (1,0), which stays put.
        let mut f = FlowField2D::zeros(3, 1);
        f.vectors[0] = [1.0, 0.0];
        let r = range_map(&f);
        assert_eq!(r.values(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn threshold_is_strict() {
        let r = RangeMap(ImageBuffer::from_vec(3, 1, 1, vec![0.95, 0.9500001, 1.0]).unwrap());
        assert_eq!(visibility_mask(&r, 0.95).visible, vec![false, true, true]);
    }

    #[test]
    fn contraction_flow_hides_periphery() {
        let (w, h) = (9, 9);
        let f = FlowField2D::from_fn(w, h, |x, y| [4.0 - x as f64, 4.0 - y as f64]);
        let m = visibility_mask(&range_map(&f), VISIBILITY_THRESHOLD);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(m.visible[y * w + x], x == 4 && y == 4);
            }
        }
    }

    #[test]
    fn in_bounds_splat_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (10, 8);
        // Displacements keep every flowed point inside [0, w-1] x [0, h-1].
        let f = FlowField2D::from_fn(w, h, |x, y| {
            let tx: f64 = rng.gen_range(0.0..(w - 1) as f64);
            let ty: f64 = rng.gen_range(0.0..(h - 1) as f64);
            [tx - x as f64, ty - y as f64]
        });
        let r = range_map(&f);
        assert!((r.total_mass() - (w * h) as f64).abs() < 1e-9);
    }
}
