//! Dyadic image pyramids and resampling between levels.

use crate::error::{Error, Result};
use crate::geometry::FlowField2D;
use crate::image::ImageBuffer;
use crate::warping::{bilinear_sample, bilinear_sample_vjp};

/// 2x2 average pooling; an odd trailing row or column is dropped.
pub fn downsample(image: &ImageBuffer) -> Result<ImageBuffer> {
    let (w, h, c) = (image.width() / 2, image.height() / 2, image.channels());
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot halve a {}x{} image",
            image.width(),
            image.height()
        )));
    }
    Ok(ImageBuffer::from_fn(w, h, c, |x, y, ch| {
        0.25 * (image.get(2 * x, 2 * y, ch)
            + image.get(2 * x + 1, 2 * y, ch)
            + image.get(2 * x, 2 * y + 1, ch)
            + image.get(2 * x + 1, 2 * y + 1, ch))
    }))
}

/// Level 0 is the input; level `k` halves level `k - 1`.
pub fn build_pyramid(image: &ImageBuffer, levels: usize) -> Result<Vec<ImageBuffer>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let mut out = vec![image.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}

/// Where each pixel of a `width x height` grid lands in a grid `factor` times
/// coarser, following the pixel-center convention of [`downsample`].
fn coarse_coords(width: usize, height: usize, factor: f64) -> Vec<[f64; 2]> {
    (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            [(x + 0.5) / factor - 0.5, (y + 0.5) / factor - 0.5]
        })
        .collect()
}

/// Bilinear upsampling of `image` onto a `width x height` grid that is
/// `factor` times finer.
pub fn upsample(image: &ImageBuffer, width: usize, height: usize, factor: f64) -> Result<ImageBuffer> {
    bilinear_sample(image, &coarse_coords(width, height, factor), width, height)
}

/// Transpose of [`upsample`].
pub fn upsample_vjp(coarse: &ImageBuffer, grad_fine: &ImageBuffer, factor: f64) -> Result<ImageBuffer> {
    let coords = coarse_coords(grad_fine.width(), grad_fine.height(), factor);
    Ok(bilinear_sample_vjp(coarse, &coords, grad_fine)?.0)
}

/// Upsamples a flow field and rescales its displacements.
pub fn upsample_flow(flow: &FlowField2D, width: usize, height: usize, factor: f64) -> Result<FlowField2D> {
    let up = upsample(&flow.to_image(), width, height, factor)?;
    let mut f = FlowField2D::from_image(&up.map(|v| v * factor))?;
    f.valid = vec![true; width * height];
    Ok(f)
}

/// Average-pools a flow field and rescales its displacements.
pub fn downsample_flow(flow: &FlowField2D) -> Result<FlowField2D> {
    let down = downsample(&flow.to_image())?;
    FlowField2D::from_image(&down.map(|v| v * 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_level_is_the_input() {
        let img = ImageBuffer::from_fn(5, 3, 1, |x, y, _| (x + y) as f64);
        assert_eq!(build_pyramid(&img, 1).unwrap(), vec![img]);
    }

    #[test]
    fn constants_survive_pooling() {
        let p = build_pyramid(&ImageBuffer::filled(4, 4, 3, 0.25), 2).unwrap();
        assert_eq!((p[1].width(), p[1].height()), (2, 2));
        assert!(p[1].data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn paper_resolution_has_forty_by_thirty_two_coarsest_level() {
        let p = build_pyramid(&ImageBuffer::new(320, 256, 3), 4).unwrap();
        let dims: Vec<_> = p.iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(dims, vec![(320, 256), (160, 128), (80, 64), (40, 32)]);
    }

    #[test]
    fn too_many_levels_is_an_error() {
        assert!(build_pyramid(&ImageBuffer::new(4, 4, 1), 4).is_err());
        assert!(build_pyramid(&ImageBuffer::new(4, 4, 1), 0).is_err());
    }

    #[test]
    fn upsampling_preserves_linear_ramps_in_the_interior() {
        let coarse = ImageBuffer::from_fn(8, 8, 1, |x, y, _| 2.0 * x as f64 + y as f64);
        let fine = upsample(&coarse, 16, 16, 2.0).unwrap();
        let pooled = downsample(&fine).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                assert!((pooled.get(x, y, 0) - coarse.get(x, y, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_vjp_is_the_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coarse = ImageBuffer::from_fn(4, 3, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let g = ImageBuffer::from_fn(8, 6, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let fine = upsample(&coarse, 8, 6, 2.0).unwrap();
        let lhs: f64 = fine.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let adj = upsample_vjp(&coarse, &g, 2.0).unwrap();
        let rhs: f64 = coarse.data().iter().zip(adj.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn flow_resampling_rescales_vectors() {
        let f = FlowField2D::uniform(8, 8, [2.0, -1.0]);
        let d = downsample_flow(&f).unwrap();
        assert!(d.vectors.iter().all(|v| *v == [1.0, -0.5]));
        let u = upsample_flow(&d, 8, 8, 2.0).unwrap();
        assert!(u.vectors.iter().all(|v| *v == [2.0, -1.0]));
    }
}
