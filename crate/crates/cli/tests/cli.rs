use std::path::Path;
use std::process::{Command, Output};

use afdepth::geometry::PoseSE3;
use afdepth::synth::{plane_scene, TextureSpec};
use serde_json::{json, Value};

fn afdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afdepth")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic experiment; `tz` far behind the plane makes synthesis fail.
fn write_config(dir: &Path, tz: f64) -> std::path::PathBuf {
    let pose = PoseSE3::new([0.0, 0.002, 0.0], [3.0, 0.5, tz]);
    let scene = plane_scene(32, 32.0, 100.0, vec![pose], TextureSpec::default()).unwrap();
    let config = json!({
        "input": {
            "kind": "synthetic",
            "scene": scene,
            "illumination": { "mode": "affine", "gain": 1.0, "bias": 0.1 },
        },
        "solver": { "stage1_iters": 40, "stage2_iters": 40, "levels": 2 },
        "output": path(&dir.join("bundle")),
        "seed": 3,
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    p
}

/// The single JSON error line a failing command prints on stderr.
fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    serde_json::from_str(lines[0]).unwrap()
}

fn read(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn run_then_eval_and_report_the_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), -0.5);
    let out = afdepth(&["--threads", "1", "run", "--config", path(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let bundle = tmp.path().join("bundle");
    let metrics = read(&bundle.join("metrics.json"));
    assert_eq!(printed["metrics"], metrics);
    assert_eq!(read(&bundle.join("manifest.json"))["seed"], 3);

    // Re-evaluating the written depth maps reproduces the stored metrics.
    let eval = afdepth(&["eval", "--bundle", path(&bundle)]);
    assert!(eval.status.success());
    let evaluated: Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(evaluated, metrics["depth"]);
    let explicit = afdepth(&[
        "eval",
        "--pred",
        path(&bundle.join("depth.pfm")),
        "--gt",
        path(&bundle.join("gt_depth.pfm")),
    ]);
    assert_eq!(explicit.stdout, eval.stdout);

    let csv = tmp.path().join("report.csv");
    let report = afdepth(&["report", path(&bundle), "--out", path(&csv)]);
    assert!(report.status.success());
    let table = String::from_utf8(report.stdout).unwrap();
    assert!(table.starts_with("bundle"), "{table}");
    assert_eq!(table.lines().count(), 2);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);
}

#[test]
fn synth_writes_frames_that_solve_reads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), -0.5);
    let frames = tmp.path().join("frames");
    let out = afdepth(&["synth", "--config", path(&cfg), "--out", path(&frames)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["target.png", "source_0.png", "gt_depth.pfm", "frames.json"] {
        assert!(frames.join(f).is_file(), "{f}");
    }
    let bundle = tmp.path().join("solved");
    let out = afdepth(&[
        "solve",
        "--config",
        path(&frames.join("frames.json")),
        "--out",
        path(&bundle),
        "--no-af",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(bundle.join("depth.pfm").is_file());
    // PNG frames carry no ground-truth poses, only depth.
    let metrics = read(&bundle.join("metrics.json"));
    assert!(metrics["depth"]["abs_rel"].as_f64().unwrap().is_finite());
    let config = read(&bundle.join("config.json"));
    assert_eq!(config["solver"]["appearance_flow"], false);
}

#[test]
fn malformed_config_reports_the_config_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, r#"{"input": {"kind": "synthetic"}, "unknown": 1}"#).unwrap();
    let out = afdepth(&["run", "--config", path(&p)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["stage"], "config");

    let missing = afdepth(&["run", "--config", path(&tmp.path().join("absent.json"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(error_line(&missing)["error"]["stage"], "config");
}

#[test]
fn failing_stage_is_named_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), -200.0);
    let out = afdepth(&["run", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["error"]["stage"], "synth");
    assert!(!err["error"]["message"].as_str().unwrap().is_empty());
    let recorded = read(&tmp.path().join("bundle").join("error.json"));
    assert_eq!(recorded["stage"], "synth");
}

#[test]
fn bad_arguments_exit_with_two() {
    let out = afdepth(&["run"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["stage"], "arguments");
    let out = afdepth(&["--threads", "0", "report", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(afdepth(&["--help"]).status.success());
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), -0.5);
    let hashes = |threads: &str| -> Vec<(String, String)> {
        let out_dir = tmp.path().join(format!("t{threads}"));
        let out = afdepth(&["--threads", threads, "run", "--config", path(&cfg), "--out", path(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let manifest = read(&out_dir.join("manifest.json"));
        manifest["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| (f["path"].as_str().unwrap().to_string(), f["sha256"].as_str().unwrap().to_string()))
            .filter(|(p, _)| p != "diagnostics.json" && p != "config.json")
            .collect()
    };
    assert_eq!(hashes("1"), hashes("3"));
}
