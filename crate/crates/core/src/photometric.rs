//! Structural similarity, the combined photometric error and brightness
//! calibration with appearance flow.
//!
//! SSIM statistics come from a 3x3 box window with reflection padding. When a
//! visibility mask is supplied the window only averages visible taps, so the
//! values of masked pixels never reach the error at visible ones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Weights of the self-supervised objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// SSIM share of the photometric error.
    pub alpha: f64,
    /// Regularizer weight.
    pub kappa: f64,
    /// Residual-based appearance-flow smoothness.
    pub lambda1: f64,
    /// Auxiliary (optical-flow registered) photometric term.
    pub lambda2: f64,
    /// Edge-aware depth smoothness.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            kappa: 1.0,
            lambda1: 0.01,
            lambda2: 0.01,
            lambda3: 0.0001,
        }
    }
}

impl LossWeights {
    /// Weights used by the synthetic test suite. Per-pixel depth needs a far
    /// stronger smoothness term than the default, and the appearance flow a
    /// stronger residual-based one, to keep interpolation error from being
    /// fitted as geometry or brightness.
    pub fn synthetic_suite() -> Self {
        Self {
            lambda1: 1.0,
            lambda3: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.kappa, self.lambda1, self.lambda2, self.lambda3];
        if !(0.0..=1.0).contains(&self.alpha) || all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Appearance flow kept as an unconstrained latent field; the brightness
/// offset is `tanh(latent)`, strictly inside (-1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceFlowField {
    pub latent: ImageBuffer,
}

impl AppearanceFlowField {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            latent: ImageBuffer::new(width, height, channels),
        }
    }

    pub fn values(&self) -> ImageBuffer {
        self.latent.map(f64::tanh)
    }

    /// Chains a gradient on the offsets back onto the latent field.
    pub fn latent_gradient(&self, grad_values: &ImageBuffer) -> ImageBuffer {
        self.latent
            .zip_map(grad_values, |z, g| {
                let t = z.tanh();
                g * (1.0 - t * t)
            })
            .expect("appearance flow gradient shape")
    }
}

#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// The nine reflected taps of the 3x3 window around `(x, y)`.
#[inline]
fn window(w: usize, h: usize, x: usize, y: usize) -> [usize; 9] {
    let mut taps = [0usize; 9];
    let mut k = 0;
    for dy in -1i64..=1 {
        let yy = reflect(y as i64 + dy, h);
        for dx in -1i64..=1 {
            taps[k] = yy * w + reflect(x as i64 + dx, w);
            k += 1;
        }
    }
    taps
}

#[derive(Clone, Copy, Default)]
struct Stats {
    mu_a: f64,
    mu_b: f64,
    e_aa: f64,
    e_bb: f64,
    e_ab: f64,
    n: f64,
}

#[inline]
fn window_stats(a: &[f64], b: &[f64], c: usize, ch: usize, taps: &[usize; 9], mask: Option<&[bool]>) -> Stats {
    let mut s = Stats::default();
    for &q in taps {
        if mask.is_some_and(|m| !m[q]) {
            continue;
        }
        let (x, y) = (a[q * c + ch], b[q * c + ch]);
        s.mu_a += x;
        s.mu_b += y;
        s.e_aa += x * x;
        s.e_bb += y * y;
        s.e_ab += x * y;
        s.n += 1.0;
    }
    s.mu_a /= s.n;
    s.mu_b /= s.n;
    s.e_aa /= s.n;
    s.e_bb /= s.n;
    s.e_ab /= s.n;
    s
}

#[inline]
fn ssim_from_stats(s: &Stats) -> f64 {
    let a1 = 2.0 * s.mu_a * s.mu_b + SSIM_C1;
    let a2 = 2.0 * (s.e_ab - s.mu_a * s.mu_b) + SSIM_C2;
    let b1 = s.mu_a * s.mu_a + s.mu_b * s.mu_b + SSIM_C1;
    let b2 = (s.e_aa - s.mu_a * s.mu_a) + (s.e_bb - s.mu_b * s.mu_b) + SSIM_C2;
    a1 * a2 / (b1 * b2)
}

/// `∂SSIM/∂(μa, μb, E[a²], E[b²], E[ab])`.
#[inline]
fn ssim_partials(s: &Stats) -> (f64, [f64; 5]) {
    let a1 = 2.0 * s.mu_a * s.mu_b + SSIM_C1;
    let a2 = 2.0 * (s.e_ab - s.mu_a * s.mu_b) + SSIM_C2;
    let b1 = s.mu_a * s.mu_a + s.mu_b * s.mu_b + SSIM_C1;
    let b2 = (s.e_aa - s.mu_a * s.mu_a) + (s.e_bb - s.mu_b * s.mu_b) + SSIM_C2;
    let den = b1 * b2;
    let ssim = a1 * a2 / den;
    let d_a1 = a2 / den;
    let d_a2 = a1 / den;
    let d_b1 = -ssim / b1;
    let d_b2 = -ssim / b2;
    let d_mu_a = 2.0 * s.mu_b * (d_a1 - d_a2) + 2.0 * s.mu_a * (d_b1 - d_b2);
    let d_mu_b = 2.0 * s.mu_a * (d_a1 - d_a2) + 2.0 * s.mu_b * (d_b1 - d_b2);
    (ssim, [d_mu_a, d_mu_b, d_b2, d_b2, 2.0 * d_a2])
}

fn check_pair(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[bool]>) -> Result<()> {
    a.ensure_same_shape(b, "photometric inputs")?;
    if a.width() < 2 || a.height() < 2 {
        return Err(Error::Shape("SSIM needs at least 2x2 pixels".into()));
    }
    if let Some(m) = mask {
        if m.len() != a.pixel_count() {
            return Err(Error::Shape("mask length".into()));
        }
    }
    Ok(())
}

/// Channel-averaged SSIM at every visible pixel; masked pixels read 1.
pub fn ssim_map_masked(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[bool]>) -> Result<ImageBuffer> {
    check_pair(a, b, mask)?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    let (ad, bd) = (a.data(), b.data());
    let inv_c = 1.0 / c as f64;
    let mut out = vec![1.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let p = y * w + x;
            if mask.is_some_and(|m| !m[p]) {
                continue;
            }
            let taps = window(w, h, x, y);
            let mut acc = 0.0;
            for ch in 0..c {
                acc += ssim_from_stats(&window_stats(ad, bd, c, ch, &taps, mask));
            }
            row[x] = acc * inv_c;
        }
    });
    ImageBuffer::from_vec(w, h, 1, out)
}

/// Channel-averaged SSIM over the full image.
pub fn ssim_map(a: &ImageBuffer, b: &ImageBuffer) -> Result<ImageBuffer> {
    ssim_map_masked(a, b, None)
}

/// `Φ = α (1 − SSIM)/2 + (1 − α) |a − b|` per visible pixel (L1 channel-averaged);
/// masked pixels read 0.
pub fn photometric_error_masked(
    a: &ImageBuffer,
    b: &ImageBuffer,
    alpha: f64,
    mask: Option<&[bool]>,
) -> Result<ImageBuffer> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let ssim = ssim_map_masked(a, b, mask)?;
    let c = a.channels();
    let inv_c = 1.0 / c as f64;
    let data = (0..a.pixel_count())
        .map(|p| {
            if mask.is_some_and(|m| !m[p]) {
                return 0.0;
            }
            let l1 = a
                .pixel(p)
                .iter()
                .zip(b.pixel(p))
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                * inv_c;
            alpha * (1.0 - ssim.data()[p]) / 2.0 + (1.0 - alpha) * l1
        })
        .collect();
    ImageBuffer::from_vec(a.width(), a.height(), 1, data)
}

pub fn photometric_error(a: &ImageBuffer, b: &ImageBuffer, alpha: f64) -> Result<ImageBuffer> {
    photometric_error_masked(a, b, alpha, None)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adjoint of [`photometric_error_masked`] for an upstream per-pixel gradient.
pub fn photometric_error_vjp(
    a: &ImageBuffer,
    b: &ImageBuffer,
    alpha: f64,
    mask: Option<&[bool]>,
    grad_map: &ImageBuffer,
) -> Result<(ImageBuffer, ImageBuffer)> {
    check_pair(a, b, mask)?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    if grad_map.width() != w || grad_map.height() != h || grad_map.channels() != 1 {
        return Err(Error::Shape("photometric gradient map".into()));
    }
    let (ad, bd) = (a.data(), b.data());
    let g = grad_map.data();
    let inv_c = 1.0 / c as f64;
    let visible = |p: usize| mask.is_none_or(|m| m[p]);

    let mut ga = ImageBuffer::new(w, h, c);
    let mut gb = ImageBuffer::new(w, h, c);

    // Per-window coefficients, already divided by the tap count: index 0..5
    // follow `ssim_partials`, one block per channel.
    let mut coef = vec![[0.0f64; 5]; w * h * c];
    coef.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let p = y * w + x;
            if !visible(p) || g[p] == 0.0 {
                continue;
            }
            let d_ssim = -alpha / 2.0 * inv_c * g[p];
            let taps = window(w, h, x, y);
            for ch in 0..c {
                let s = window_stats(ad, bd, c, ch, &taps, mask);
                let (_, d) = ssim_partials(&s);
                let scale = d_ssim / s.n;
                row[x * c + ch] = d.map(|v| v * scale);
            }
        }
    });

    // Transposed window: scatter each coefficient onto its visible taps.
    let mut t = vec![[0.0f64; 5]; w * h * c];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !visible(p) || g[p] == 0.0 {
                continue;
            }
            let taps = window(w, h, x, y);
            for &q in &taps {
                if !visible(q) {
                    continue;
                }
                for ch in 0..c {
                    let k = coef[p * c + ch];
                    let dst = &mut t[q * c + ch];
                    for i in 0..5 {
                        dst[i] += k[i];
                    }
                }
            }
        }
    }

    let l1_scale = (1.0 - alpha) * inv_c;
    {
        let gad = ga.data_mut();
        let gbd = gb.data_mut();
        for q in 0..w * h {
            if !visible(q) {
                continue;
            }
            for ch in 0..c {
                let i = q * c + ch;
                let (x, y) = (ad[i], bd[i]);
                let tt = t[i];
                let l1 = l1_scale * g[q] * sign(x - y);
                gad[i] = tt[0] + 2.0 * x * tt[2] + y * tt[4] + l1;
                gbd[i] = tt[1] + 2.0 * y * tt[3] + x * tt[4] - l1;
            }
        }
    }
    Ok((ga, gb))
}

/// `clamp(I^t + C_δ, 0, 1)`.
pub fn calibrate_brightness(target: &ImageBuffer, af: &ImageBuffer) -> Result<ImageBuffer> {
    target.ensure_same_shape(af, "brightness calibration")?;
    target.zip_map(af, |t, c| (t + c).clamp(0.0, 1.0))
}

/// Gradient of [`calibrate_brightness`] with respect to the offsets; zero
/// where the clamp is active.
pub fn calibrate_brightness_vjp(
    target: &ImageBuffer,
    af: &ImageBuffer,
    grad_out: &ImageBuffer,
) -> Result<ImageBuffer> {
    target.ensure_same_shape(af, "brightness calibration")?;
    target.ensure_same_shape(grad_out, "brightness calibration gradient")?;
    let data = target
        .data()
        .iter()
        .zip(af.data())
        .zip(grad_out.data())
        .map(|((&t, &c), &g)| if (0.0..=1.0).contains(&(t + c)) { g } else { 0.0 })
        .collect();
    ImageBuffer::from_vec(target.width(), target.height(), target.channels(), data)
}

/// Signed residual `I_syn − (I^t + C_δ)` of the generalized dynamic image
/// constraint.
pub fn gdic_residual(
    target: &ImageBuffer,
    source_warped: &ImageBuffer,
    af: &ImageBuffer,
) -> Result<ImageBuffer> {
    let calibrated = calibrate_brightness(target, af)?;
    source_warped.zip_map(&calibrated, |s, t| s - t)
}
