//! Command-line front end wiring the generators, trainer, baselines, and
//! reporting into one reproducible workflow. Every subcommand prints its
//! resolved configuration and seed so runs can be replayed exactly.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::compartment::{ctm_extrapolate, lm_fit, FitResult, InputFunction};
use crate::data::{
    extract_roi_tac, load_framestack, load_roi, save_framestack, save_roi, RoiMask, Tac,
};
use crate::error::{Error, Result};
use crate::evalreport::{
    evaluate_mse, persistence_baseline, render_tac_svg, write_report_csv, EvalRow, Method,
};
use crate::phantom::{
    default_frame_times, generate_kinetic_phantom, generate_rd_phantom, KineticParams,
    PhantomConfig, PhantomKind, RdParams,
};
use crate::rdnet::{load_model, save_model, NetworkConfig};
use crate::spectral::SpectralPlan;
use crate::trainer::{rollout_predict, train, write_train_log, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "rdpet",
    about = "Reaction-diffusion network and compartment-model baselines for \
             dynamic image sequences",
    disable_help_subcommand = true
)]
struct Cli {
    /// Worker thread cap (computation is currently single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom sequence.
    Phantom(PhantomArgs),
    /// Train the reaction-diffusion network on the first `split` frames.
    Train(TrainArgs),
    /// Autoregressive rollout of a trained model over the test frames.
    Predict(PredictArgs),
    /// Fit a compartment model to an ROI curve and extrapolate it.
    FitCtm(FitCtmArgs),
    /// ROI-mean MSE report over test frames.
    Evaluate(EvaluateArgs),
    /// SVG plot of a measured ROI curve with predictions.
    PlotTac(PlotTacArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindFlag {
    Rd,
    Kinetic,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long, value_enum)]
    kind: KindFlag,
    #[arg(long, default_value_t = 64)]
    nx: usize,
    #[arg(long, default_value_t = 64)]
    ny: usize,
    /// Frame count; 15 uses the standard 90-minute schedule, other counts
    /// use an early-dense quadratic schedule over 90 minutes.
    #[arg(long, default_value_t = 15)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON sidecar with the generating ground truth.
    #[arg(long)]
    truth_out: Option<PathBuf>,
    /// Optional full-field ROI file (name `all`) for downstream evaluation.
    #[arg(long)]
    roi_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    split: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// IMEX steps per frame transition.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_model: PathBuf,
    /// Optional CSV training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 11)]
    split: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CtmFlag {
    #[value(name = "1tcm")]
    One,
    #[value(name = "2tcm")]
    Two,
    #[value(name = "3tcm")]
    Three,
}

impl CtmFlag {
    fn n_tissue(self) -> usize {
        match self {
            CtmFlag::One => 1,
            CtmFlag::Two => 2,
            CtmFlag::Three => 3,
        }
    }
}

#[derive(Debug, Args)]
struct FitCtmArgs {
    #[arg(long)]
    data: PathBuf,
    /// Target ROI file whose mean curve is fitted.
    #[arg(long)]
    roi: PathBuf,
    /// ROI file defining the measured input (blood) region.
    #[arg(long)]
    input_roi: PathBuf,
    #[arg(long, value_enum)]
    model: CtmFlag,
    /// Number of leading frames used for fitting; the rest are predicted.
    #[arg(long, default_value_t = 11)]
    fit_frames: usize,
    #[arg(long, default_value_t = 8)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON with the fit and the extrapolated test-frame curve.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    truth: PathBuf,
    /// Network prediction stack covering the test frames.
    #[arg(long)]
    pred: PathBuf,
    /// ROI files; one evaluation row per ROI and method.
    #[arg(long, required = true, num_args = 1..)]
    rois: Vec<PathBuf>,
    #[arg(long, default_value_t = 11)]
    split: usize,
    /// Compartment-fit JSON files (from fit-ctm); each adds one ctm row.
    #[arg(long, num_args = 0..)]
    ctm_fit: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlotTacArgs {
    #[arg(long)]
    truth: PathBuf,
    /// Prediction stacks as `label=path`; label defaults to the file stem.
    #[arg(long, num_args = 0..)]
    pred: Vec<String>,
    #[arg(long)]
    roi: PathBuf,
    #[arg(long, default_value_t = 11)]
    split: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::FitCtm(args) => cmd_fit_ctm(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::PlotTac(args) => cmd_plot_tac(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn frame_schedule(frames: usize) -> Vec<f64> {
    if frames == 15 {
        return default_frame_times();
    }
    // early-dense quadratic spacing over the same 90-minute scan
    (1..=frames)
        .map(|j| 90.0 * (j as f64 / frames as f64).powi(2))
        .collect()
}

fn cmd_phantom(args: PhantomArgs) -> Result<()> {
    let kind = match args.kind {
        KindFlag::Rd => PhantomKind::Rd(RdParams::default()),
        KindFlag::Kinetic => PhantomKind::Kinetic(KineticParams::default()),
    };
    let config = PhantomConfig {
        nx: args.nx,
        ny: args.ny,
        times: frame_schedule(args.frames),
        seed: args.seed,
        kind,
    };
    println!(
        "phantom config: {}",
        serde_json::to_string(&config).expect("config serializes")
    );
    let (stack, truth) = match &config.kind {
        PhantomKind::Rd(_) => generate_rd_phantom(&config)?,
        PhantomKind::Kinetic(_) => generate_kinetic_phantom(&config)?,
    };
    save_framestack(&stack, &args.out)?;
    println!("wrote {} frames to {}", stack.times.len(), args.out.display());
    if let Some(path) = &args.truth_out {
        let json = serde_json::to_string_pretty(&truth).expect("truth serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &args.roi_out {
        let roi = RoiMask::new("all", Array2::from_elem((args.ny, args.nx), true))?;
        save_roi(&roi, path)?;
    }
    Ok(())
}

/// Optional overrides loaded from `--config`; unknown keys are rejected.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    channels: Option<usize>,
    steps: Option<usize>,
    time_dim: Option<usize>,
    scan_duration: Option<f64>,
    split: Option<usize>,
    lr: Option<f64>,
    clip: Option<f64>,
    iters: Option<usize>,
    seed: Option<u64>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        }
        None => FileConfig::default(),
    };
    // precedence: built-in defaults < config file < command-line flags
    let mut net = NetworkConfig::default();
    let mut tc = TrainConfig::default();
    if let Some(v) = args.channels.or(file.channels) {
        net.channels = v;
    }
    if let Some(v) = args.steps.or(file.steps) {
        net.internal_steps = v;
    }
    if let Some(v) = file.time_dim {
        net.time_dim = v;
    }
    if let Some(v) = file.scan_duration {
        net.scan_duration = v;
    }
    if let Some(v) = args.split.or(file.split) {
        tc.split = v;
    }
    if let Some(v) = args.lr.or(file.lr) {
        tc.lr = v;
    }
    if let Some(v) = args.clip.or(file.clip) {
        tc.clip_norm = v;
    }
    if let Some(v) = args.iters.or(file.iters) {
        tc.max_iters = v;
    }
    if let Some(v) = args.seed.or(file.seed) {
        tc.seed = v;
    }
    println!(
        "train config: net={} train={}",
        serde_json::to_string(&net).expect("config serializes"),
        serde_json::to_string(&tc).expect("config serializes")
    );
    let stack = load_framestack(&args.data)?;
    let (params, report) = train(&stack, &net, &tc)?;
    save_model(&params, &net, &args.out_model)?;
    if let Some(path) = &args.log {
        write_train_log(&report, path)?;
    }
    println!(
        "trained {} iterations, final loss {:e}",
        report.records.len(),
        report.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    println!(
        "predict config: data={} model={} split={}",
        args.data.display(),
        args.model.display(),
        args.split
    );
    let stack = load_framestack(&args.data)?;
    let (params, net) = load_model(&args.model)?;
    let plan = SpectralPlan::new(stack.nx, stack.ny);
    let pred = rollout_predict(&stack, args.split, &params, &net, &plan)?;
    save_framestack(&pred, &args.out)?;
    println!("wrote {} predicted frames to {}", pred.times.len(), args.out.display());
    Ok(())
}

/// Output of `fit-ctm`: the fit plus its extrapolated test-frame curve.
#[derive(Debug, Serialize, Deserialize)]
pub struct CtmOutput {
    pub roi: String,
    pub fit: FitResult,
    pub prediction: Tac,
    /// True when the input tail fell back to a constant extension.
    pub constant_tail: bool,
}

fn cmd_fit_ctm(args: FitCtmArgs) -> Result<()> {
    println!(
        "fit-ctm config: model={}tcm fit_frames={} starts={} seed={}",
        args.model.n_tissue(),
        args.fit_frames,
        args.starts,
        args.seed
    );
    let stack = load_framestack(&args.data)?;
    let nt = stack.times.len();
    if args.fit_frames < 2 || args.fit_frames >= nt {
        return Err(Error::Argument(format!(
            "fit-frames must be in 2..{nt}, got {}",
            args.fit_frames
        )));
    }
    let roi = load_roi(&args.roi)?;
    let input_roi = load_roi(&args.input_roi)?;
    let target = extract_roi_tac(&stack, &roi)?;
    let input = InputFunction::Sampled(extract_roi_tac(&stack, &input_roi)?);
    let fit = lm_fit(
        &target,
        &input,
        args.model.n_tissue(),
        args.fit_frames,
        args.starts,
        args.seed,
    )?;
    let extrap = ctm_extrapolate(&fit, &input, &stack.times[args.fit_frames..])?;
    let out = CtmOutput {
        roi: roi.name.clone(),
        fit,
        prediction: extrap.tac,
        constant_tail: extrap.constant_tail,
    };
    let json = serde_json::to_string_pretty(&out).expect("fit output serializes");
    fs::write(&args.out, json).map_err(|e| Error::io(&args.out, e))?;
    println!(
        "fit roi `{}`: rss {:e}, converged {}",
        out.roi, out.fit.rss, out.fit.converged
    );
    Ok(())
}

fn load_ctm_output(path: &Path) -> Result<CtmOutput> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    println!(
        "evaluate config: split={} rois={} ctm_fits={}",
        args.split,
        args.rois.len(),
        args.ctm_fit.len()
    );
    let truth = load_framestack(&args.truth)?;
    let pred = load_framestack(&args.pred)?;
    let rois: Vec<RoiMask> = args.rois.iter().map(|p| load_roi(p)).collect::<Result<_>>()?;
    let mut rows = evaluate_mse(&truth, &pred, &rois, args.split, Method::Rdnet)?;
    let persist = persistence_baseline(&truth, args.split)?;
    rows.extend(evaluate_mse(&truth, &persist, &rois, args.split, Method::Persistence)?);
    for path in &args.ctm_fit {
        let ctm = load_ctm_output(path)?;
        let roi = rois
            .iter()
            .find(|r| r.name == ctm.roi)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "ctm fit {} names roi `{}` not among the given ROIs",
                    path.display(),
                    ctm.roi
                ))
            })?;
        let truth_tac = extract_roi_tac(&truth, roi)?;
        let test = &truth_tac.values[args.split..];
        if ctm.prediction.values.len() != test.len() {
            return Err(Error::Argument(format!(
                "ctm fit {} predicts {} frames, expected {}",
                path.display(),
                ctm.prediction.values.len(),
                test.len()
            )));
        }
        let mse = test
            .iter()
            .zip(ctm.prediction.values.iter())
            .map(|(t, p)| (t - p) * (t - p))
            .sum::<f64>()
            / test.len() as f64;
        rows.push(EvalRow {
            roi_name: ctm.roi,
            method: Method::Ctm,
            mse,
            n_test_frames: test.len(),
        });
    }
    write_report_csv(&rows, &args.out)?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_plot_tac(args: PlotTacArgs) -> Result<()> {
    println!(
        "plot-tac config: roi={} split={} preds={}",
        args.roi.display(),
        args.split,
        args.pred.len()
    );
    let truth = load_framestack(&args.truth)?;
    let roi = load_roi(&args.roi)?;
    let truth_tac = extract_roi_tac(&truth, &roi)?;
    let mut preds = Vec::new();
    for spec in &args.pred {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let path = PathBuf::from(spec);
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| spec.clone());
                (label, path)
            }
        };
        let stack = load_framestack(&path)?;
        let tac = extract_roi_tac(&stack, &roi)?;
        preds.push((label, tac));
    }
    render_tac_svg(&truth_tac, &preds, args.split, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
