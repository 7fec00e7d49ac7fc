//! Raster, configuration and report file formats.
//!
//! Viewable rasters are PNG (8 or 16 bit, intensities scaled by the type
//! maximum). Float rasters are little-endian PFM holding `f32` samples, so a
//! round trip through PFM is exact only for values already representable in
//! single precision; [`quantize_f32`] gives that representation.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use image::{DynamicImage, ImageBuffer as PngBuffer, Luma, Rgb};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::FlowField2D;
use crate::image::ImageBuffer;
use crate::solver::HistoryEntry;
use crate::warping::VisibilityMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Reads an 8- or 16-bit grayscale or RGB(A) PNG into `[0, 1]`. Alpha is
/// dropped; gray images have one channel.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::file(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        DynamicImage::ImageLumaA8(b) => (
            1,
            b.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        ),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        DynamicImage::ImageRgba8(b) => (
            3,
            b.pixels().flat_map(|p| p.0[..3].iter().map(|&v| v as f64 / 255.0).collect::<Vec<_>>()).collect(),
        ),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
        DynamicImage::ImageLumaA16(b) => (
            1,
            b.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        ),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
        DynamicImage::ImageRgba16(b) => (
            3,
            b.pixels().flat_map(|p| p.0[..3].iter().map(|&v| v as f64 / 65535.0).collect::<Vec<_>>()).collect(),
        ),
        other => return Err(Error::file(path, format!("unsupported pixel type {:?}", other.color()))),
    };
    ImageBuffer::from_vec(w, h, channels, data)
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes a one- or three-channel image, clamping to `[0, 1]` and rounding to
/// the nearest code value.
pub fn write_image(path: impl AsRef<Path>, image: &ImageBuffer, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (image.width() as u32, image.height() as u32);
    let d = image.data();
    let err = |e: image::ImageError| Error::file(path, e);
    match (image.channels(), depth) {
        (1, BitDepth::Eight) => {
            let raw: Vec<u8> = d.iter().map(|&v| quantize(v, 255.0) as u8).collect();
            PngBuffer::<Luma<u8>, _>::from_raw(w, h, raw).expect("sized").save(path).map_err(err)
        }
        (3, BitDepth::Eight) => {
            let raw: Vec<u8> = d.iter().map(|&v| quantize(v, 255.0) as u8).collect();
            PngBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("sized").save(path).map_err(err)
        }
        (1, BitDepth::Sixteen) => {
            let raw: Vec<u16> = d.iter().map(|&v| quantize(v, 65535.0) as u16).collect();
            PngBuffer::<Luma<u16>, _>::from_raw(w, h, raw).expect("sized").save(path).map_err(err)
        }
        (3, BitDepth::Sixteen) => {
            let raw: Vec<u16> = d.iter().map(|&v| quantize(v, 65535.0) as u16).collect();
            PngBuffer::<Rgb<u16>, _>::from_raw(w, h, raw).expect("sized").save(path).map_err(err)
        }
        (c, _) => Err(Error::file(path, format!("cannot store {c} channels in a PNG"))),
    }
}

/// Rounds every sample to single precision, the resolution of PFM files.
pub fn quantize_f32(image: &ImageBuffer) -> ImageBuffer {
    image.map(|v| v as f32 as f64)
}

/// Encodes a one- or three-channel raster as little-endian PFM. Rows are
/// stored bottom to top.
pub fn encode_pfm(image: &ImageBuffer) -> Result<Vec<u8>> {
    let tag = match image.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Shape(format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * c * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(image.get(x, y, ch) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    /// Next whitespace-delimited token and the offset where it starts.
    fn token(&mut self) -> Option<(usize, &str)> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return None;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok().map(|t| (start, t))
    }
}

/// Decodes a PFM byte stream. `path` only labels errors.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let fail = |offset: usize, reason: String| Error::Pfm {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let mut r = HeaderReader { bytes, pos: 0 };
    let channels = match r.token() {
        Some((_, "PF")) => 3,
        Some((_, "Pf")) => 1,
        Some((at, t)) => return Err(fail(at, format!("unknown magic {t:?}"))),
        None => return Err(fail(0, "empty file".into())),
    };
    let mut dim = |what: &str| -> Result<usize> {
        let at = r.pos;
        let (at, t) = r.token().ok_or_else(|| fail(at, format!("missing {what}")))?;
        match t.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(fail(at, format!("bad {what} {t:?}"))),
        }
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let at = r.pos;
    let (scale_at, scale) = r.token().ok_or_else(|| fail(at, "missing scale".into()))?;
    let scale: f64 = scale
        .parse()
        .map_err(|_| fail(scale_at, format!("bad scale {scale:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(fail(scale_at, "scale must be non-zero".into()));
    }
    let little = scale < 0.0;
    // Exactly one whitespace byte separates the header from the payload.
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(fail(r.pos, "header is not terminated".into()));
    }
    let start = r.pos + 1;
    let expected = width * height * channels * 4;
    let payload = &bytes[start..];
    if payload.len() < expected {
        return Err(fail(
            start + payload.len(),
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(fail(start + expected, "trailing bytes after payload".into()));
    }
    let mut img = ImageBuffer::new(width, height, channels);
    let mut chunks = payload.chunks_exact(4);
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let b: [u8; 4] = chunks.next().expect("length checked").try_into().expect("4 bytes");
                let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
                img.set(x, y, c, v as f64);
            }
        }
    }
    Ok(img)
}

pub fn write_pfm(path: impl AsRef<Path>, image: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(image)?).map_err(|e| Error::file(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_pfm(&bytes, path)
}

/// Flow as a three-channel raster `(du, dv, valid)`.
pub fn flow_to_raster(flow: &FlowField2D) -> ImageBuffer {
    ImageBuffer::from_fn(flow.width, flow.height, 3, |x, y, c| {
        let i = y * flow.width + x;
        match c {
            2 => f64::from(u8::from(flow.valid[i])),
            _ => flow.vectors[i][c],
        }
    })
}

pub fn flow_from_raster(raster: &ImageBuffer) -> Result<FlowField2D> {
    if raster.channels() != 3 {
        return Err(Error::Shape("flow raster needs three channels".into()));
    }
    let mut flow = FlowField2D::from_image(raster)?;
    flow.valid = raster.data().chunks(3).map(|p| p[2] > 0.5).collect();
    Ok(flow)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::file(path, e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json_bytes(value)?).map_err(|e| Error::file(path, e))
}

pub fn history_csv(history: &[HistoryEntry]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for entry in history {
        w.serialize(entry)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_history_csv(path: impl AsRef<Path>) -> Result<Vec<HistoryEntry>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::file(path, e))).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::file(path, e))?))
}

/// Writes `bytes` and flushes them to disk before returning.
pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(bytes).map_err(|e| Error::file(path, e))?;
    f.sync_all().map_err(|e| Error::file(path, e))
}

/// Piecewise-linear approximation of the viridis color map.
fn viridis(t: f64) -> [f64; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.267, 0.005, 0.329],
        [0.229, 0.322, 0.546],
        [0.128, 0.567, 0.551],
        [0.369, 0.789, 0.383],
        [0.993, 0.906, 0.144],
    ];
    let s = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (s.floor() as usize).min(STOPS.len() - 2);
    let f = s - i as f64;
    [0, 1, 2].map(|c| STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c]))
}

/// Color-maps the channel mean of `field` between `range` (or its own
/// min/max) into an RGB image.
pub fn heatmap(field: &ImageBuffer, range: Option<(f64, f64)>) -> ImageBuffer {
    let g = field.channel_mean();
    let (lo, hi) = range.unwrap_or_else(|| g.min_max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    ImageBuffer::from_fn(g.width(), g.height(), 3, |x, y, c| viridis((g.get(x, y, 0) - lo) / span)[c])
}

pub fn mask_image(mask: &VisibilityMask) -> ImageBuffer {
    mask.to_image()
}

/// SVG line plot of the total loss per accepted iteration, one polyline per
/// (stage, level, block) segment, on a logarithmic axis.
pub fn loss_curve_svg(history: &[HistoryEntry]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    let values: Vec<f64> = history.iter().map(|e| e.total.max(1e-300).log10()).collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">total loss (log10) per accepted step</text>"#,
        W / 2.0
    );
    if values.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len().max(2) - 1;
    let px = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / n as f64;
    let py = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / span;
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        svg,
        r#"<text x="4" y="{}" font-family="sans-serif" font-size="11">{hi:.3}</text>"#,
        PAD + 4.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="4" y="{}" font-family="sans-serif" font-size="11">{lo:.3}</text>"#,
        H - PAD
    );
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut start = 0;
    let mut segment = 0;
    while start < history.len() {
        let key = |e: &HistoryEntry| (e.stage, e.level, e.block.clone());
        let mut end = start + 1;
        while end < history.len() && key(&history[end]) == key(&history[start]) {
            end += 1;
        }
        let mut d = String::new();
        for i in start..end {
            let _ = write!(d, "{}{:.2} {:.2} ", if i == start { "M" } else { "L" }, px(i), py(values[i]));
        }
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            d.trim_end(),
            colors[segment % colors.len()]
        );
        segment += 1;
        start = end;
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, c, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn png_round_trips_within_one_code_value() {
        let dir = tempfile::tempdir().unwrap();
        for (c, depth, max) in [(1, BitDepth::Eight, 255.0), (3, BitDepth::Eight, 255.0), (3, BitDepth::Sixteen, 65535.0), (1, BitDepth::Sixteen, 65535.0)] {
            let img = random(7, 5, c, 3);
            let p = dir.path().join(format!("i{c}{max}.png"));
            write_image(&p, &img, depth).unwrap();
            let back = read_image(&p).unwrap();
            assert_eq!((back.width(), back.height(), back.channels()), (7, 5, c));
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 0.5 / max + 1e-12);
            }
        }
    }

    #[test]
    fn missing_png_names_the_path() {
        let err = read_image("/definitely/not/here.png").unwrap_err().to_string();
        assert!(err.contains("/definitely/not/here.png"), "{err}");
    }

    #[test]
    fn pfm_round_trip_is_bit_exact_at_single_precision() {
        for c in [1, 3] {
            let img = quantize_f32(&random(6, 4, c, 8).map(|v| 300.0 * v - 20.0));
            let bytes = encode_pfm(&img).unwrap();
            assert!(bytes.starts_with(if c == 1 { b"Pf\n" } else { b"PF\n" }));
            assert_eq!(decode_pfm(&bytes, Path::new("x.pfm")).unwrap(), img);
        }
        assert!(encode_pfm(&ImageBuffer::new(2, 2, 2)).is_err());
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let img = ImageBuffer::from_vec(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(payload[..4].try_into().unwrap()), 2.0);
    }

    #[test]
    fn big_endian_payloads_are_accepted() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_be_bytes());
        let img = decode_pfm(&bytes, Path::new("be.pfm")).unwrap();
        assert_eq!(img.data(), &[1.5, -2.0]);
    }

    fn pfm_error_offset(bytes: &[u8]) -> usize {
        match decode_pfm(bytes, Path::new("bad.pfm")).unwrap_err() {
            Error::Pfm { offset, .. } => offset,
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn malformed_headers_report_byte_offsets() {
        assert_eq!(pfm_error_offset(b"P6\n1 1\n-1.0\n"), 0);
        assert_eq!(pfm_error_offset(b"Pf\n1 x\n-1.0\n"), 5);
        assert_eq!(pfm_error_offset(b"Pf\n1 1\nabc\n"), 7);
        assert_eq!(pfm_error_offset(b""), 0);
        let mut truncated = b"Pf\n2 2\n-1.0\n".to_vec();
        truncated.extend_from_slice(&[0u8; 10]);
        assert_eq!(pfm_error_offset(&truncated), 12 + 10);
    }

    #[test]
    fn flow_raster_keeps_validity() {
        let mut f = FlowField2D::from_fn(3, 2, |x, y| [x as f64 - 0.25, 0.5 * y as f64]);
        f.valid[4] = false;
        assert_eq!(flow_from_raster(&flow_to_raster(&f)).unwrap(), f);
    }

    #[test]
    fn history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = vec![
            HistoryEntry {
                stage: 1,
                level: 3,
                block: "forward/0".into(),
                iteration: 0,
                total: 0.5,
                data_fidelity: 0.4,
                l_rs: 0.0,
                l_ax: 0.4,
                l_es: 0.1,
            },
            HistoryEntry {
                stage: 2,
                level: 0,
                block: "joint".into(),
                iteration: 7,
                total: 0.25,
                data_fidelity: 0.2,
                l_rs: 0.01,
                l_ax: 0.02,
                l_es: 0.03,
            },
        ];
        let p = dir.path().join("h.csv");
        write_bytes(&p, &history_csv(&h).unwrap()).unwrap();
        assert_eq!(read_history_csv(&p).unwrap(), h);
        let svg = loss_curve_svg(&h);
        assert!(svg.starts_with("<svg") && svg.matches("<path").count() == 3);
    }

    #[test]
    fn heatmap_spans_the_color_map() {
        let f = ImageBuffer::from_fn(2, 1, 1, |x, _, _| x as f64);
        let h = heatmap(&f, None);
        assert_eq!(h.channels(), 3);
        assert!((h.get(0, 0, 0) - 0.267).abs() < 1e-12);
        assert!((h.get(1, 0, 1) - 0.906).abs() < 1e-12);
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
