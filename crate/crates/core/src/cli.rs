//! The `deepfuse` command line: augmentation preview, training, evaluation
//! and single-video prediction.
//!
//! Configuration precedence is flags over the `--config` file over built-in
//! defaults. Relative paths inside a config file resolve against the file's
//! directory. Every `train` run writes its fully resolved configuration to
//! `run_config.json` in the output directory; passing that file back with
//! `--config` repeats the run.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_pipeline, denormalize, AugmentConfig, CutoutMode};
use crate::backbones::Preset;
use crate::datapipe::{
    decode_image, load_landmarks, make_batches, sample_frames, write_image, BatchMode, DatasetManifest, FaceFrame,
    FrameRef, Label, SamplingPolicy, Split, Subset,
};
use crate::error::{CheckpointError, Error, Result};
use crate::evaluate::{aggregate_video, check_coverage, group_by_subset, predict_videos, subset_report};
use crate::model::{HybridModel, HybridModelConfig};
use crate::numerics::Tensor;
use crate::training::{fit, load_checkpoint, save_checkpoint, MetricsLog, TrainConfig, DECISION_THRESHOLD};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "DEEPFUSE_WORKERS";

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const DATA: i32 = 5;
    pub const TRAINING: i32 = 6;
    pub const MISSING_PREDICTIONS: i32 = 7;
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => exit::USAGE,
        Error::Config(_) | Error::Json { .. } => exit::CONFIG,
        Error::Checkpoint(CheckpointError::ConfigMismatch { .. } | CheckpointError::Dtype { .. }) => exit::CONFIG,
        Error::Io { .. } | Error::Checkpoint(CheckpointError::NotFound(_)) => exit::IO,
        Error::Dimension(_) | Error::Data(_) | Error::Decode { .. } | Error::Checkpoint(_) => exit::DATA,
        Error::NonFinite { .. } => exit::TRAINING,
        Error::MissingPredictions(_) => exit::MISSING_PREDICTIONS,
    }
}

#[derive(Debug, Parser)]
#[command(name = "deepfuse", version, about = "Hybrid early-fusion deepfake detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply the augmentation pipeline to one image and save the result and its plan.
    AugmentPreview(PreviewArgs),
    /// Train a model on the train/val splits of a manifest.
    Train(TrainArgs),
    /// Score every video of a split and write per-subset accuracy reports.
    Eval(EvalArgs),
    /// Score one video from its frames.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[arg(long)]
    image: PathBuf,
    /// 81-point landmark sidecar; required by face_cutout.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// none (no augmentation at all), face_cutout or random_cutout.
    #[arg(long, default_value = "none")]
    mode: CutoutMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image; `.png` writes PNG, anything else binary PPM.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with an `augment` section.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// none, face_cutout or random_cutout.
    #[arg(long)]
    cutout: Option<CutoutMode>,
    /// Cap on frames drawn per split.
    #[arg(long)]
    max_frames: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    /// Frames scored per video.
    #[arg(long, default_value_t = 16)]
    frames: usize,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    frames: Vec<PathBuf>,
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Full architecture; overrides `preset` when present.
    pub model: Option<HybridModelConfig>,
    pub train: TrainConfig,
    pub sampling: SamplingPolicy,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Toy,
            model: None,
            train: TrainConfig::default(),
            sampling: SamplingPolicy::default(),
            manifest: None,
            out: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = cfg.manifest.map(|p| base.join(p));
        cfg.out = cfg.out.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn model_config(&self) -> HybridModelConfig {
        self.model.clone().unwrap_or_else(|| HybridModelConfig::preset(self.preset))
    }

    /// Checks every field; the train seed always follows the run seed.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.train.validate()?;
        self.model_config().validate()?;
        if self.manifest.is_none() {
            return Err(Error::Config("no manifest given (--manifest or \"manifest\" in the config)".into()));
        }
        if self.out.is_none() {
            return Err(Error::Config("no output directory given (--out or \"out\" in the config)".into()));
        }
        Ok(self)
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn preview(a: PreviewArgs) -> Result<()> {
    let mut augment = match &a.config {
        Some(p) => RunConfig::load(p)?.train.augment,
        None => AugmentConfig::default(),
    };
    if a.mode == CutoutMode::None {
        // `none` previews the evaluation view: no geometric jitter either
        augment = AugmentConfig { normalization: augment.normalization, ..AugmentConfig::disabled() };
    }
    let pixels = decode_image(&a.image)?;
    let landmarks = a.landmarks.as_deref().map(load_landmarks).transpose()?;
    let frame = FaceFrame::new(pixels, landmarks, Label::Real, "preview", Subset::Custom, 0)?;
    let (tensor, plan) = apply_pipeline::<f32>(&frame, a.mode, a.seed, &augment)?;
    let img = denormalize(&tensor, &augment.normalization)?.to_rgb8()?;
    write_image(&a.out, &img)?;
    let plan_path = a.out.with_extension("plan.json");
    let json = serde_json::to_string_pretty(&plan).map_err(|e| Error::json("augmentation plan", e))?;
    write_text(&plan_path, &json)?;
    println!("wrote {} and {}", a.out.display(), plan_path.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = a.manifest {
        cfg.manifest = Some(m);
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.preset {
        cfg.preset = p;
        cfg.model = None;
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(m) = a.momentum {
        cfg.train.momentum = m;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(c) = a.cutout {
        cfg.train.cutout = c;
    }
    if let Some(n) = a.max_frames {
        cfg.sampling.max_frames = Some(n);
    }
    cfg.manifest = cfg.manifest.as_deref().map(absolute);
    cfg.out = cfg.out.as_deref().map(absolute);
    let cfg = cfg.resolve()?;
    let (manifest_path, out) = (cfg.manifest.clone().expect("resolved"), cfg.out.clone().expect("resolved"));

    let manifest = DatasetManifest::load(&manifest_path)?;
    if cfg.train.cutout == CutoutMode::FaceCutout {
        manifest.require_landmarks(Split::Train)?;
    }
    let train_frames: Vec<FrameRef> = sample_frames(&manifest, Split::Train, &cfg.sampling)?.frames();
    let val_frames: Vec<FrameRef> = sample_frames(&manifest, Split::Val, &cfg.sampling)?.frames();
    log::info!("{} training frames, {} validation frames", train_frames.len(), val_frames.len());

    create_dir(&out)?;
    let json = serde_json::to_string_pretty(&cfg).map_err(|e| Error::json("run config", e))?;
    write_text(&out.join(RUN_CONFIG_FILE), &json)?;

    let mut model = HybridModel::<f32>::new(cfg.model_config(), cfg.seed)?;
    let mut log = MetricsLog::create(&out.join(METRICS_FILE))?;
    let outcome = fit(&mut model, train_frames.as_slice(), val_frames.as_slice(), &cfg.train, |m| log.append(m))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &model, Some(&outcome.state))?;
    println!(
        "trained {} epoch(s), stopped by {:?}, best epoch {:?}; checkpoint {}",
        outcome.state.epoch,
        outcome.state.stop_reason.expect("fit sets a reason"),
        outcome.state.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.checkpoint, None)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let policy =
        SamplingPolicy { test_frames: a.frames, fake_frames: a.frames, real_frames: a.frames, max_frames: None };
    let sampled = sample_frames(&manifest, a.split, &policy)?;
    let preds = predict_videos(&ckpt.model, &sampled, &AugmentConfig::disabled(), 16)?;
    let report = subset_report(&group_by_subset(&preds), DECISION_THRESHOLD);

    create_dir(&a.out)?;
    write_text(&a.out.join("report.json"), &report.to_json())?;
    write_text(&a.out.join("report.txt"), &report.to_table())?;
    let lines: Vec<String> = preds.iter().map(|p| serde_json::to_string(p).expect("prediction serializes")).collect();
    write_text(&a.out.join("predictions.jsonl"), &(lines.join("\n") + "\n"))?;
    print!("{}", report.to_table());
    check_coverage(manifest.split(a.split).map(|v| v.video_id.as_str()), &preds)
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.checkpoint, None)?;
    let frames: Vec<FaceFrame> = a
        .frames
        .iter()
        .enumerate()
        .map(|(i, p)| FaceFrame::new(decode_image(p)?, None, Label::Real, "predict", Subset::Custom, i))
        .collect::<Result<_>>()?;
    let mut batches = make_batches(frames.as_slice(), 16, 0, 0, BatchMode::Eval, &AugmentConfig::disabled())?;
    let mut probs = Vec::with_capacity(frames.len());
    while let Some(b) = batches.next_batch::<f32>() {
        let inputs: Tensor<f32> = b?.inputs;
        probs.extend(ckpt.model.predict(&inputs)?);
    }
    let score = aggregate_video(&probs)?;
    println!("score {score:.6} label {} frames {}", Label::from_score(score, DECISION_THRESHOLD), probs.len());
    Ok(())
}

fn init_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one command and returns the process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let result = init_workers().and_then(|_| match cli.command {
        Command::AugmentPreview(a) => preview(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
    });
    match result {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
