//! Command-line front end: scene synthesis, solving, evaluation, gradient
//! checks, full experiments and report aggregation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afdepth::experiment::{
    eval_files, report, report_csv, report_table, run_experiment, write_inputs, synthesize, EvalOptions,
    ExperimentConfig, InputSpec, DEPTH, GT_DEPTH,
};
use afdepth::geometry::Intrinsics;
use afdepth::gradcheck::{run_gradcheck, GradcheckConfig};
use afdepth::io::{read_json, to_json_bytes, write_bytes};
use afdepth::solver::SolveConfig;
use afdepth::synth::IlluminationSpec;
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "afdepth", version, about = "Direct depth, pose and appearance-flow estimation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene and write frames plus ground truth.
    Synth(SynthArgs),
    /// Optimize depth, poses and appearance flow for a PNG pair or triplet.
    Solve(SolveArgs),
    /// Depth metrics from a predicted and a ground-truth PFM, or a bundle.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Full experiment from a configuration file.
    Run(RunArgs),
    /// Aggregate bundle histories and metrics into one table.
    Report(ReportArgs),
}

/// Overrides shared by the commands that build an experiment.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with a solver configuration replacing the one in the config.
    #[arg(long)]
    solver: Option<PathBuf>,
    /// Pin the appearance flow at zero.
    #[arg(long)]
    no_af: bool,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    stage1_iters: Option<usize>,
    #[arg(long)]
    stage2_iters: Option<usize>,
    /// Depth cap for evaluation, in millimeters.
    #[arg(long)]
    cap: Option<f64>,
    /// Skip evaluation.
    #[arg(long)]
    no_eval: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), Failure> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        if let Some(p) = &self.solver {
            cfg.solver = load(p)?;
        }
        if self.no_af {
            cfg.solver.appearance_flow = false;
        }
        if let Some(v) = self.levels {
            cfg.solver.levels = v;
        }
        if let Some(v) = self.stage1_iters {
            cfg.solver.stage1_iters = v;
        }
        if let Some(v) = self.stage2_iters {
            cfg.solver.stage2_iters = v;
        }
        if let Some(v) = self.cap {
            cfg.eval.cap = v;
        }
        if self.no_eval {
            cfg.eval.enabled = false;
        }
        Ok(())
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Experiment configuration with a synthetic input.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replaces the illumination of the configuration (JSON file).
    #[arg(long)]
    illumination: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    /// Experiment configuration; cannot be combined with the frame flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// One or two source frames.
    #[arg(long = "source")]
    sources: Vec<PathBuf>,
    /// Intrinsics as JSON (`fx, fy, cx, cy, width, height`).
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    #[arg(long)]
    gt_depth: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Bundle directory; uses its depth and ground-truth PFMs.
    #[arg(long, conflicts_with_all = ["pred", "gt"])]
    bundle: Option<PathBuf>,
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    #[arg(long, default_value_t = afdepth::eval::DEFAULT_DEPTH_CAP)]
    cap: f64,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the reports as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    /// Bundle directories.
    #[arg(required = true)]
    bundles: Vec<PathBuf>,
    /// Write the table as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure carrying the stage it happened in.
struct Failure {
    stage: String,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let stage = error
            .downcast_ref::<afdepth::Error>()
            .and_then(|e| e.stage())
            .unwrap_or("cli")
            .to_string();
        Failure { stage, error }
    }
}

/// Reads a JSON configuration file; failures belong to the config stage.
fn load<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, Failure> {
    read_json(path).map_err(|e| Failure {
        stage: "config".into(),
        error: e.into(),
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    print!("{}", String::from_utf8(to_json_bytes(value)?)?);
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let cfg: ExperimentConfig = load(&a.config)?;
    let InputSpec::Synthetic { scene, illumination } = &cfg.input else {
        return Err(anyhow::anyhow!("synth needs a configuration with a synthetic input").into());
    };
    let illumination: IlluminationSpec = match &a.illumination {
        Some(p) => load(p)?,
        None => illumination.clone(),
    };
    let inputs = synthesize(scene, &illumination).map_err(|e| e.in_stage("synth"))?;
    let mut files = write_inputs(&inputs, &a.out)?;
    // A configuration that solves the written frames.
    let out = absolute(&a.out)?;
    let frames = ExperimentConfig {
        input: InputSpec::Frames {
            target: out.join("target.png"),
            sources: (0..inputs.sources.len()).map(|i| out.join(format!("source_{i}.png"))).collect(),
            intrinsics: inputs.intrinsics,
            gt_depth: Some(out.join(GT_DEPTH)),
        },
        output: out.join("bundle"),
        ..cfg.clone()
    };
    write_bytes(a.out.join("frames.json"), &frames.to_canonical_json()?)?;
    files.push("frames.json".into());
    print_json(&serde_json::json!({ "files": files }))?;
    Ok(())
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(p).with_context(|| format!("{}: cannot create directory", p.display()))?;
    Ok(std::fs::canonicalize(p)?)
}

fn finish(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let bundle = run_experiment(cfg)?;
    print_json(&serde_json::json!({
        "bundle": bundle.dir,
        "metrics": bundle.metrics,
        "poses": bundle.result.state.poses,
        "low_texture": bundle.result.low_texture,
    }))?;
    Ok(())
}

fn solve(a: &SolveArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => load(p)?,
        None => {
            let (Some(target), Some(k)) = (&a.target, &a.intrinsics) else {
                return Err(anyhow::anyhow!("solve needs --config, or --target, --source and --intrinsics").into());
            };
            let intrinsics: Intrinsics = load(k)?;
            ExperimentConfig {
                input: InputSpec::Frames {
                    target: target.clone(),
                    sources: a.sources.clone(),
                    intrinsics,
                    gt_depth: a.gt_depth.clone(),
                },
                solver: SolveConfig::default(),
                eval: EvalOptions::default(),
                output: PathBuf::from("bundle"),
                seed: 0,
            }
        }
    };
    if a.config.is_some() && (a.target.is_some() || !a.sources.is_empty()) {
        return Err(anyhow::anyhow!("frame flags cannot be combined with --config").into());
    }
    a.overrides.apply(&mut cfg)?;
    finish(&cfg)
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let (pred, gt) = match (&a.bundle, &a.pred, &a.gt) {
        (Some(b), _, _) => (b.join(DEPTH), b.join(GT_DEPTH)),
        (None, Some(p), Some(g)) => (p.clone(), g.clone()),
        _ => return Err(anyhow::anyhow!("eval needs --bundle, or --pred and --gt").into()),
    };
    let m = eval_files(&pred, &gt, a.cap).map_err(|e| e.in_stage("eval"))?;
    if let Some(out) = &a.out {
        write_bytes(out, &to_json_bytes(&m)?)?;
    }
    print_json(&m)?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let mut cfg: GradcheckConfig = match &a.config {
        Some(p) => load(p)?,
        None => GradcheckConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let reports = run_gradcheck(&cfg).map_err(|e| e.in_stage("gradcheck"))?;
    for r in &reports {
        println!(
            "{:<24} {:<22} tested {:>5} excluded {:>4} passed {:>5} max_rel {:.2e} {}",
            r.term,
            r.block,
            r.tested,
            r.excluded,
            r.passed,
            r.max_rel_error,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        write_bytes(out, &to_json_bytes(&reports)?)?;
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{}/{}", r.term, r.block))
        .collect();
    if !failed.is_empty() {
        return Err(Failure {
            stage: "gradcheck".into(),
            error: anyhow::anyhow!("gradient mismatch in {}", failed.join(", ")),
        });
    }
    Ok(())
}

fn run(a: &RunArgs) -> Result<(), Failure> {
    let mut cfg: ExperimentConfig = load(&a.config)?;
    a.overrides.apply(&mut cfg)?;
    finish(&cfg)
}

fn report_cmd(a: &ReportArgs) -> Result<(), Failure> {
    let rows = report(&a.bundles).map_err(|e| e.in_stage("report"))?;
    if let Some(out) = &a.out {
        write_bytes(out, &report_csv(&rows)?)?;
    }
    print!("{}", report_table(&rows));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("arguments", &e.to_string());
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = threads(n) {
            emit_error("cli", &format!("{e:#}"));
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Solve(a) => solve(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            emit_error(&f.stage, &format!("{:#}", f.error));
            ExitCode::FAILURE
        }
    }
}

fn threads(n: usize) -> anyhow::Result<()> {
    if n == 0 {
        bail!("--threads must be positive");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// One JSON object on stderr: `{"error": {"stage": ..., "message": ...}}`.
fn emit_error(stage: &str, message: &str) {
    let line = serde_json::json!({ "error": { "stage": stage, "message": message.trim_end() } });
    eprintln!("{line}");
}
