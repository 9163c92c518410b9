//! `satblock` command-line front end.
//!
//! Exit codes: 0 success, 1 computation failure, 2 usage error. Flags,
//! config files and scene specs are invocation inputs, so problems with them
//! are usage errors; problems with scene data or solver runs are computation
//! failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use satblock::io::{self, TRACKS_FILE};
use satblock::pipeline::{self, Mode, PipelineConfig};
use satblock::rpc::CameraSet;
use satblock::synth::{self, SceneSpec};

const THREADS_VAR: &str = "SATBLOCK_THREADS";

#[derive(Parser, Debug)]
#[command(name = "satblock", version, about = "RPC bias block adjustment with geometrically constrained least-squares matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene with its ground truth.
    Synth(SynthArgs),
    /// Run one pipeline mode and write a JSON report.
    Run(RunArgs),
    /// Sweep modes and window sizes and write a CSV table.
    Compare(CompareArgs),
    /// Score a report against a truth file.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene description JSON; omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the seed of the spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SceneArgs {
    /// Directory of `<id>.rpc` models with `<id>.f32` or `<id>.pgm` rasters.
    #[arg(long)]
    images: PathBuf,
    /// Tracks JSON lines [default: tracks.jsonl in the image directory].
    #[arg(long)]
    tracks: Option<PathBuf>,
    /// Truth JSON whose check tracks give the external RMSE.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolverArgs {
    /// Image whose bias is held at zero [default: most observed image].
    #[arg(long)]
    anchor: Option<u32>,
    /// Outlier threshold, pixels [default: 2].
    #[arg(long)]
    threshold: Option<f64>,
    /// Outer alternation limit of the unified mode [default: 5].
    #[arg(long)]
    max_outer: Option<usize>,
    /// Internal RMSE change that ends the alternation, pixels [default: 0.001].
    #[arg(long)]
    outer_tolerance: Option<f64>,
    /// Maximum-weight factor [default: 0.5].
    #[arg(long)]
    p: Option<f64>,
    /// Reprojection attenuation, pixels squared [default: 2].
    #[arg(long)]
    sigma: Option<f64>,
    /// JSON settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// ba, lsm_ba or unified.
    #[arg(long)]
    mode: Option<Mode>,
    /// Matching window size, odd and at least 3.
    #[arg(long, value_parser = parse_window)]
    window: Option<usize>,
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write the refined tracks.
    #[arg(long)]
    tracks_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Comma-separated modes [default: ba,lsm_ba,unified].
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<Mode>>,
    /// Comma-separated window sizes.
    #[arg(long, value_delimiter = ',', value_parser = parse_window)]
    windows: Option<Vec<usize>>,
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// CSV output [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Image directory; with it the external RMSE is recomputed from the
    /// truth check tracks and the report biases.
    #[arg(long)]
    images: Option<PathBuf>,
    /// JSON output [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Settings file accepted by `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    mode: Option<Mode>,
    window: Option<usize>,
    modes: Option<Vec<Mode>>,
    windows: Option<Vec<usize>>,
    anchor: Option<u32>,
    threshold: Option<f64>,
    max_outer: Option<usize>,
    outer_tolerance: Option<f64>,
    p: Option<f64>,
    sigma: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Evaluation {
    anchor: u32,
    bias_rmse_px: f64,
    external_rmse_px: Option<f64>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Compute(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Compute(e)
    }
}

impl From<satblock::Error> for Failure {
    fn from(e: satblock::Error) -> Self {
        Failure::Compute(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_window(s: &str) -> Result<usize, String> {
    let w: usize = s.parse().map_err(|_| format!("'{s}' is not a window size"))?;
    if w < 3 || w % 2 == 0 {
        return Err(format!("window size must be odd and at least 3, got {w}"));
    }
    Ok(w)
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn pipeline_config(mode: Mode, window: usize, solver: &SolverArgs, file: &ConfigFile) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::new(mode, window);
    cfg.anchor = solver.anchor.or(file.anchor);
    cfg.threshold = solver.threshold.or(file.threshold).unwrap_or(cfg.threshold);
    cfg.max_outer = solver.max_outer.or(file.max_outer).unwrap_or(cfg.max_outer);
    cfg.outer_tolerance = solver.outer_tolerance.or(file.outer_tolerance).unwrap_or(cfg.outer_tolerance);
    cfg.p = solver.p.or(file.p).unwrap_or(cfg.p);
    cfg.sigma = solver.sigma.or(file.sigma).unwrap_or(cfg.sigma);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_inputs(scene: &SceneArgs) -> Result<pipeline::SceneInputs, Failure> {
    let tracks = scene.tracks.clone().unwrap_or_else(|| scene.images.join(TRACKS_FILE));
    let mut inputs = io::load_scene(&scene.images, &tracks)?;
    if let Some(truth) = &scene.truth {
        inputs.check_tracks = io::read_truth(truth)?.check_tracks()?;
    }
    Ok(inputs)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn synth_cmd(args: &SynthArgs) -> Result<(), Failure> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<SceneSpec>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => SceneSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let scene = synth::render_scene(&spec)?;
    io::write_scene(&args.out, &scene)?;
    println!("wrote {} images and {} tracks to {}", scene.models.len(), scene.tracks.len(), args.out.display());
    Ok(())
}

fn run_cmd(args: &RunArgs) -> Result<(), Failure> {
    let file = load_config(args.solver.config.as_deref())?;
    let mode = args.mode.or(file.mode).ok_or_else(|| usage("--mode is required (flag or config)"))?;
    let window = args.window.or(file.window).ok_or_else(|| usage("--window is required (flag or config)"))?;
    let cfg = pipeline_config(mode, window, &args.solver, &file)?;
    let inputs = load_inputs(&args.scene)?;
    let out = pipeline::run(&inputs, &cfg)?;
    io::write_report(&args.out, &out.report)?;
    if let Some(path) = &args.tracks_out {
        io::write_tracks(path, &out.tracks)?;
    }
    let r = &out.report;
    println!(
        "mode={} window={} internal_rmse_px={} external_rmse_px={} diverged={} outliers={}",
        r.mode,
        r.window,
        io::format_sig(r.internal_rmse_px),
        r.external_rmse_px.map(io::format_sig).unwrap_or_else(|| "none".into()),
        r.diverged,
        r.outliers
    );
    Ok(())
}

fn compare_cmd(args: &CompareArgs) -> Result<(), Failure> {
    let file = load_config(args.solver.config.as_deref())?;
    let windows = args.windows.clone().or(file.windows.clone()).ok_or_else(|| usage("--windows is required (flag or config)"))?;
    if let Some(bad) = windows.iter().find(|w| parse_window(&w.to_string()).is_err()) {
        return Err(usage(format!("window size must be odd and at least 3, got {bad}")));
    }
    let modes = args.modes.clone().or(file.modes.clone()).unwrap_or_else(|| Mode::ALL.to_vec());
    if windows.is_empty() || modes.is_empty() {
        return Err(usage("need at least one mode and one window"));
    }
    let base = pipeline_config(modes[0], windows[0], &args.solver, &file)?;
    let inputs = load_inputs(&args.scene)?;
    let rows = pipeline::compare_modes(&inputs, &windows, &modes, &base);
    for row in &rows {
        if let Err(e) = &row.outcome {
            eprintln!("warning: {} w={} failed: {e}", row.mode, row.window);
        }
    }
    write_output(args.out.as_deref(), &pipeline::comparison_csv(&rows))
}

fn eval_cmd(args: &EvalArgs) -> Result<(), Failure> {
    let truth = io::read_truth(&args.truth)?;
    let report = io::read_report(&args.report)?;
    let bias_rmse_px = synth::bias_error(&report.biases, &truth.biases, report.anchor)?;
    let external_rmse_px = match &args.images {
        Some(dir) => {
            let mut cams = CameraSet::new(io::load_models(dir)?);
            for (id, b) in &report.biases {
                if !cams.contains(*id) {
                    return Err(satblock::Error::ImageSetMismatch(format!("report image {id} has no model")).into());
                }
                cams.set_bias(*id, *b);
            }
            Some(pipeline::evaluate_external(&truth.check_tracks()?, &cams)?)
        }
        None => report.external_rmse_px,
    };
    let eval = Evaluation { anchor: report.anchor, bias_rmse_px, external_rmse_px };
    write_output(args.out.as_deref(), &io::to_json_rounded(&eval)?)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(format!("{THREADS_VAR} must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Compute(e.into()))
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Compute(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
