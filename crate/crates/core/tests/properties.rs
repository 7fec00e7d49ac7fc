use afdepth::eval::{evaluate_depth, pearson};
use afdepth::geometry::{euler_to_matrix, matrix_to_euler, rigid_flow, FlowField2D, Intrinsics, PoseSE3};
use afdepth::photometric::ssim_map;
use afdepth::warping::range_map;
use afdepth::ImageBuffer;
use nalgebra::Vector3;
use proptest::prelude::*;

fn angle() -> impl Strategy<Value = f64> {
    -1.4..1.4f64
}

fn pose() -> impl Strategy<Value = PoseSE3> {
    ([angle(), angle(), angle()], [-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64])
        .prop_map(|(e, t)| PoseSE3::new(e, t))
}

proptest! {
    #[test]
    fn euler_angles_round_trip(e in [angle(), angle(), angle()]) {
        let back = matrix_to_euler(&euler_to_matrix(e));
        for i in 0..3 {
            prop_assert!((back[i] - e[i]).abs() < 1e-9, "{e:?} -> {back:?}");
        }
    }

    #[test]
    fn pose_inverse_undoes_transform(p in pose(), x in [-100.0..100.0f64, -100.0..100.0f64, 1.0..200.0f64]) {
        let x = Vector3::from(x);
        let y = p.inverse().transform(&p.transform(&x));
        prop_assert!((y - x).norm() < 1e-9 * (1.0 + x.norm()));
        let id = p.compose(&p.inverse());
        prop_assert!(id.translation_vector().norm() < 1e-9);
        prop_assert!((id.rotation() - nalgebra::Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn identity_pose_gives_zero_flow(d in prop::collection::vec(1.0..300.0f64, 36)) {
        let depth = ImageBuffer::from_vec(6, 6, 1, d).unwrap();
        let k = Intrinsics::new(6.0, 6.0, 2.5, 2.5, 6, 6).unwrap();
        let f = rigid_flow(&depth, &PoseSE3::identity(), &k).unwrap();
        prop_assert!(f.vectors.iter().all(|v| v[0].abs() < 1e-12 && v[1].abs() < 1e-12));
    }

    /// The tent kernel is a partition of unity, so every source pixel landing
    /// inside the grid contributes exactly one unit of mass.
    #[test]
    fn range_map_conserves_mass_inside_the_grid(
        targets in prop::collection::vec((0.0..7.0f64, 0.0..5.0f64, any::<bool>()), 48)
    ) {
        let (w, h) = (8, 6);
        let mut f = FlowField2D::zeros(w, h);
        for (i, &(x, y, valid)) in targets.iter().enumerate() {
            f.vectors[i] = [x - (i % w) as f64, y - (i / w) as f64];
            f.valid[i] = valid;
        }
        let expected = f.valid.iter().filter(|&&v| v).count() as f64;
        prop_assert!((range_map(&f).total_mass() - expected).abs() < 1e-9);
    }

    #[test]
    fn depth_metrics_ignore_prediction_scale(
        pairs in prop::collection::vec((1.0..200.0f64, 1.0..200.0f64), 5..60),
        s in 0.01..100.0f64,
    ) {
        let n = pairs.len();
        let pred = ImageBuffer::from_vec(n, 1, 1, pairs.iter().map(|p| p.0).collect()).unwrap();
        let gt = ImageBuffer::from_vec(n, 1, 1, pairs.iter().map(|p| p.1).collect()).unwrap();
        let (a, _) = evaluate_depth(&pred, &gt, 150.0).unwrap();
        let (b, _) = evaluate_depth(&pred.map(|v| v * s), &gt, 150.0).unwrap();
        prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-9);
        prop_assert!((a.rmse - b.rmse).abs() < 1e-7);
        // Rounding can move a pixel sitting exactly on the threshold.
        prop_assert!((a.delta - b.delta).abs() <= 100.0 / n as f64);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(
        a in prop::collection::vec(0.0..1.0f64, 75),
        b in prop::collection::vec(0.0..1.0f64, 75),
    ) {
        let a = ImageBuffer::from_vec(5, 5, 3, a).unwrap();
        let b = ImageBuffer::from_vec(5, 5, 3, b).unwrap();
        let ab = ssim_map(&a, &b).unwrap();
        let ba = ssim_map(&b, &a).unwrap();
        for (x, y) in ab.data().iter().zip(ba.data()) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!(*x <= 1.0 + 1e-12 && *x >= -1.0 - 1e-12);
        }
        prop_assert!(ssim_map(&a, &a).unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn correlation_survives_increasing_affine_maps(
        xs in prop::collection::vec(-10.0..10.0f64, 3..40),
        ys in prop::collection::vec(-10.0..10.0f64, 40),
        gain in 0.1..10.0f64,
        bias in -5.0..5.0f64,
    ) {
        let ys = &ys[..xs.len()];
        let mapped: Vec<f64> = ys.iter().map(|y| gain * y + bias).collect();
        match (pearson(&xs, ys), pearson(&xs, &mapped)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
            (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
        }
    }
}
