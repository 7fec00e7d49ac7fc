use afdepth::eval::{evaluate_depth, translation_direction_error};
use afdepth::geometry::{Intrinsics, PoseSE3};
use afdepth::losses::{total_loss, Objective, StructureParams};
use afdepth::photometric::LossWeights;
use afdepth::pyramid::{build_pyramid, upsample};
use afdepth::solver::{solve, solve_stage1_flow, solve_stage2_joint, SolveConfig, SolveState};
use afdepth::synth::{apply_illumination, plane_scene, render, IlluminationSpec, RenderedScene, SceneSpec, TextureSpec};
use afdepth::warping::{range_map, visibility_mask, VISIBILITY_THRESHOLD};
use afdepth::ImageBuffer;

fn scene(size: usize, poses: Vec<PoseSE3>) -> (SceneSpec, RenderedScene) {
    let s = plane_scene(size, size as f64, 100.0, poses, TextureSpec::default()).unwrap();
    let r = render(&s).unwrap();
    (s, r)
}

fn suite() -> SolveConfig {
    SolveConfig {
        weights: LossWeights::synthetic_suite(),
        ..SolveConfig::default()
    }
}

fn mean_visible_flow(r: &afdepth::solver::Stage1Result) -> [f64; 2] {
    let (f, m) = (&r.levels[0].forward[0], &r.levels[0].masks[0]);
    let mut sum = [0.0; 2];
    let mut n = 0.0;
    for (v, &vis) in f.vectors.iter().zip(&m.visible) {
        if vis {
            sum[0] += v[0];
            sum[1] += v[1];
            n += 1.0;
        }
    }
    [sum[0] / n, sum[1] / n]
}

#[test]
fn identical_frames_give_near_zero_flow() {
    let (_, r) = scene(32, vec![PoseSE3::identity()]);
    let s1 = solve_stage1_flow(&r.target, &[r.target.clone()], &SolveConfig::default()).unwrap();
    let f = &s1.levels[0].forward[0];
    assert!(f.mean_magnitude() < 0.05, "{}", f.mean_magnitude());
    assert!(s1.levels[0].masks[0].fraction() > 0.99);
}

#[test]
fn uniform_two_pixel_shift_is_recovered() {
    // A lateral translation of `2 Z / f` moves every pixel of a
    // fronto-parallel plane by exactly 2 px.
    let (_, r) = scene(64, vec![PoseSE3::from_translation([2.0 * 100.0 / 64.0, 0.0, 0.0])]);
    assert!(r.gt_flows[0].vectors.iter().all(|v| (v[0] - 2.0).abs() < 1e-9 && v[1].abs() < 1e-9));
    let s1 = solve_stage1_flow(&r.target, &r.sources, &SolveConfig::default()).unwrap();
    let m = mean_visible_flow(&s1);
    assert!((m[0] - 2.0).abs() < 0.1 && m[1].abs() < 0.1, "{m:?}");
}

#[test]
fn out_of_view_band_is_masked() {
    let shift = 3.0;
    let (_, r) = scene(64, vec![PoseSE3::from_translation([shift * 100.0 / 64.0, 0.0, 0.0])]);
    let s1 = solve_stage1_flow(&r.target, &r.sources, &SolveConfig::default()).unwrap();
    // Oracle: splat the exact backward flow, which is the negated uniform
    // shift on the source grid.
    let gt_backward = afdepth::geometry::FlowField2D::uniform(64, 64, [-shift, 0.0]);
    let oracle = visibility_mask(&range_map(&gt_backward), VISIBILITY_THRESHOLD);
    let mask = &s1.levels[0].masks[0];
    let (mut hidden_ok, mut hidden, mut seen_ok, mut seen) = (0, 0, 0, 0);
    for (&m, &o) in mask.visible.iter().zip(&oracle.visible) {
        if o {
            seen += 1;
            seen_ok += m as usize;
        } else {
            hidden += 1;
            hidden_ok += !m as usize;
        }
    }
    assert!(hidden > 0);
    assert!(hidden_ok as f64 >= 0.9 * hidden as f64, "{hidden_ok}/{hidden}");
    assert!(seen_ok as f64 >= 0.95 * seen as f64, "{seen_ok}/{seen}");
    // The band lies at the right edge, where target pixels leave the source.
    for y in 0..64 {
        assert!(!mask.visible[y * 64 + 63]);
    }
}

#[test]
fn clean_lateral_motion_recovers_depth_and_direction() {
    let pose = PoseSE3::new([0.0, 0.004, 0.0], [3.0, 0.5, -0.5]);
    let (s, r) = scene(64, vec![pose.clone()]);
    let res = solve(&r.target, &r.sources, &s.intrinsics, &suite()).unwrap();
    let (m, _) = evaluate_depth(&res.depth, &r.gt_depth, 150.0).unwrap();
    let dir = translation_direction_error(&res.state.poses[0], &pose).unwrap();
    assert!(m.abs_rel < 0.05, "{m:?}");
    assert!(dir < 5.0, "{dir}");
}

#[test]
fn global_brightening_needs_appearance_flow() {
    let (s, r) = scene(64, vec![PoseSE3::from_translation([3.0, 0.0, -0.5])]);
    let lit = apply_illumination(&r.sources[0], &IlluminationSpec::Affine { gain: 1.0, bias: 0.1 });
    let sources = [lit.image];
    let with = solve(&r.target, &sources, &s.intrinsics, &suite()).unwrap();
    let without = solve(
        &r.target,
        &sources,
        &s.intrinsics,
        &SolveConfig {
            appearance_flow: false,
            ..suite()
        },
    )
    .unwrap();
    assert!(without.af.iter().all(|a| a.data().iter().all(|&v| v == 0.0)));
    let (a, _) = evaluate_depth(&with.depth, &r.gt_depth, 150.0).unwrap();
    let (b, _) = evaluate_depth(&without.depth, &r.gt_depth, 150.0).unwrap();
    assert!(a.abs_rel < 0.05, "{a:?}");
    assert!(a.abs_rel < b.abs_rel, "with {} without {}", a.abs_rel, b.abs_rel);
}

#[test]
fn zero_iterations_return_the_initialization() {
    let (s, r) = scene(32, vec![PoseSE3::from_translation([2.0, 0.0, 0.0])]);
    let cfg = SolveConfig {
        stage1_iters: 0,
        stage2_iters: 0,
        ..SolveConfig::default()
    };
    let res = solve(&r.target, &r.sources, &s.intrinsics, &cfg).unwrap();
    let init = SolveState::initial(32, 32, 3, 1, &cfg);
    assert!(res.flows()[0].vectors.iter().all(|v| *v == [0.0, 0.0]));
    assert_eq!(res.state.poses, init.poses);
    assert_eq!(res.state.af_latent, init.af_latent);
    let d0 = init.log_depth.data()[0];
    assert!(res.state.log_depth.data().iter().all(|v| (v - d0).abs() < 1e-12));
    assert_eq!(res.history().count(), 0);
}

#[test]
fn runs_are_deterministic() {
    let (s, r) = scene(32, vec![PoseSE3::from_translation([2.0, 0.5, 0.0])]);
    let cfg = SolveConfig {
        stage2_iters: 30,
        ..suite()
    };
    let a = solve(&r.target, &r.sources, &s.intrinsics, &cfg).unwrap();
    let b = solve(&r.target, &r.sources, &s.intrinsics, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stage_two_leaves_flows_and_masks_untouched() {
    let (s, r) = scene(32, vec![PoseSE3::from_translation([2.0, 0.5, 0.0])]);
    let cfg = suite();
    let s1 = solve_stage1_flow(&r.target, &r.sources, &cfg).unwrap();
    let snapshot = s1.clone();
    let s2 = solve_stage2_joint(&r.target, &r.sources, &s.intrinsics, &s1, &cfg).unwrap();
    assert_eq!(s1, snapshot);
    assert!(s2.history.iter().all(|e| e.stage == 2));
    let full = solve(&r.target, &r.sources, &s.intrinsics, &cfg).unwrap();
    assert_eq!(full.stage1, snapshot);
}

#[test]
fn accepted_loss_history_never_increases() {
    let (s, r) = scene(32, vec![PoseSE3::new([0.003, -0.002, 0.0], [2.0, -1.0, -0.5])]);
    let res = solve(&r.target, &r.sources, &s.intrinsics, &suite()).unwrap();
    let history: Vec<_> = res.history().collect();
    assert!(history.iter().any(|e| e.stage == 1) && history.iter().any(|e| e.stage == 2));
    for w in history.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.stage, a.level, &a.block) == (b.stage, b.level, &b.block) {
            assert!(b.total <= a.total, "{a:?} then {b:?}");
        }
    }
}

#[test]
fn textureless_frames_are_flagged_and_keep_constant_depth() {
    let flat = ImageBuffer::filled(16, 16, 3, 0.5);
    let k = Intrinsics::new(16.0, 16.0, 7.5, 7.5, 16, 16).unwrap();
    let res = solve(&flat, &[flat.clone()], &k, &SolveConfig::default()).unwrap();
    assert!(res.low_texture);
    assert_eq!(res.gradient_energy, 0.0);
    let (lo, hi) = res.depth.min_max();
    assert!(hi - lo < 1e-9 * hi, "{lo} {hi}");
}

#[test]
fn triplet_gives_two_poses_and_two_af_fields() {
    let poses = vec![
        PoseSE3::from_translation([2.0, 0.0, 0.0]),
        PoseSE3::from_translation([-2.0, 0.0, 0.0]),
    ];
    let (s, r) = scene(32, poses);
    let cfg = SolveConfig {
        stage2_iters: 20,
        ..suite()
    };
    let res = solve(&r.target, &r.sources, &s.intrinsics, &cfg).unwrap();
    assert_eq!(res.state.poses.len(), 2);
    assert_eq!(res.af.len(), 2);
    assert_eq!(res.flows().len(), 2);
    assert_eq!(res.masks().len(), 2);
}

#[test]
fn one_or_two_sources_only() {
    let (s, r) = scene(16, vec![PoseSE3::identity()]);
    let three = vec![r.target.clone(); 3];
    assert!(solve(&r.target, &three, &s.intrinsics, &SolveConfig::default()).is_err());
    assert!(solve(&r.target, &[], &s.intrinsics, &SolveConfig::default()).is_err());
}

#[test]
fn coarse_solution_beats_cold_start_at_the_next_level() {
    let (s, r) = scene(64, vec![PoseSE3::new([0.0, 0.003, 0.0], [3.0, 1.0, -0.5])]);
    let cfg = suite();
    let s1 = solve_stage1_flow(&r.target, &r.sources, &cfg).unwrap();
    let s2 = solve_stage2_joint(&r.target, &r.sources, &s.intrinsics, &s1, &cfg).unwrap();
    let t_pyr = build_pyramid(&r.target, cfg.levels).unwrap();
    let s_pyr = build_pyramid(&r.sources[0], cfg.levels).unwrap();
    for level in 0..cfg.levels - 1 {
        let (w, h) = (t_pyr[level].width(), t_pyr[level].height());
        let objective = Objective {
            target: &t_pyr[level],
            sources: std::slice::from_ref(&s_pyr[level]),
            intrinsics: s.intrinsics.at_level(level),
            flows: &s1.levels[level].forward,
            masks: &s1.levels[level].masks,
            weights: cfg.weights,
        };
        let coarse = s2.levels[level + 1].params();
        let warm = StructureParams {
            depth: upsample(&coarse.depth, w, h, 2.0).unwrap(),
            poses: coarse.poses.clone(),
            af: coarse.af.iter().map(|a| upsample(a, w, h, 2.0).unwrap()).collect(),
        };
        let cold = SolveState::initial(w, h, 3, 1, &cfg).params();
        let (a, _) = total_loss(&objective, &warm, false).unwrap();
        let (b, _) = total_loss(&objective, &cold, false).unwrap();
        assert!(a.total <= b.total, "level {level}: warm {} cold {}", a.total, b.total);
    }
}
