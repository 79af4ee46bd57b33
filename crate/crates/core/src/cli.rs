//! Command-line interface.
//!
//! Exit status is 0 on success, 1 for usage and configuration errors and 2
//! for failures while running.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::BackboneKind;
use crate::checkpoint::Checkpoint;
use crate::episodes::{generate_synthetic_dataset, AugmentConfig, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::IouMode;
use crate::trainer::{self, EvalConfig, TrainConfig};
use crate::viz::{write_visualizations, EpisodeSpec};

#[derive(Debug, Parser)]
#[command(name = "manet", version, about = "Few-shot segmentation by mask classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shapes dataset.
    Synth(SynthArgs),
    /// Train on the base classes of a fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the novel classes of a fold.
    Eval(EvalArgs),
    /// Render the cell masks and prediction for one episode.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of shape classes
    #[arg(long, default_value_t = SynthSpec::default().num_classes)]
    pub classes: usize,
    /// Images per class
    #[arg(long, default_value_t = SynthSpec::default().images_per_class)]
    pub per_class: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = SynthSpec::default().image_size)]
    pub size: usize,
    /// Standard deviation of the pixel noise
    #[arg(long, default_value_t = SynthSpec::default().noise)]
    pub noise: f64,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    /// Small network trained from scratch
    Tiny,
    /// Frozen pretrained ResNet-50
    Resnet50,
    /// Frozen pretrained ResNet-101
    Resnet101,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON configuration; command-line flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Directory for checkpoints, log and config
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Cross-validation fold whose classes are held out
    #[arg(long)]
    pub fold: Option<usize>,
    /// Number of folds the classes are split into
    #[arg(long)]
    pub num_folds: Option<usize>,
    /// Support images per episode
    #[arg(long)]
    pub shots: Option<usize>,
    /// Grid side S.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Weight of the grid loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Train on the pixel loss alone.
    #[arg(long, conflicts_with = "lambda")]
    pub no_grid_loss: bool,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Episodes per optimizer step
    #[arg(long)]
    pub batch: Option<usize>,
    /// Number of epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training episodes per epoch
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    /// Seed for initialization and episode sampling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training image side.
    #[arg(long)]
    pub side: Option<usize>,
    /// Channel width of the head
    #[arg(long)]
    pub head_channels: Option<usize>,
    /// Feature extractor
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
    /// Parameter file for a pretrained backbone.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Keep the backbone fixed.
    #[arg(long)]
    pub freeze_backbone: bool,
    /// Disable flip, scale, rotation and shift augmentation
    #[arg(long)]
    pub no_augment: bool,
    /// Episode preparation threads (0 prepares inline)
    #[arg(long)]
    pub workers: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl TrainArgs {
    /// Defaults, then the configuration file, then flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$($field).+ = v.clone(); })*
            };
        }
        set!(
            dataset => dataset, out => out_dir, fold => fold, num_folds => num_folds, shots => shots,
            grid => model.grid, lambda => lambda, lr => lr, batch => batch, epochs => epochs,
            episodes_per_epoch => episodes_per_epoch, seed => seed, side => side,
            head_channels => model.head_channels, workers => workers,
        );
        if self.no_grid_loss {
            c.lambda = 0.0;
        }
        if let Some(b) = self.backbone {
            c.backbone.kind = match b {
                BackboneArg::Tiny => BackboneKind::Tiny,
                BackboneArg::Resnet50 => BackboneKind::PretrainedResnet50,
                BackboneArg::Resnet101 => BackboneKind::PretrainedResnet101,
            };
            if c.backbone.kind != BackboneKind::Tiny {
                let weights = self.weights.clone().or(c.backbone.weights.clone()).unwrap_or_default();
                c.backbone = crate::backbone::BackboneConfig::pretrained(c.backbone.kind, weights);
            }
        }
        if let Some(w) = &self.weights {
            c.backbone.weights = Some(w.clone());
        }
        if self.freeze_backbone {
            c.backbone.frozen = true;
        }
        if self.no_augment {
            c.augment = AugmentConfig::none();
        }
        if self.resume.is_some() {
            c.resume = self.resume.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest to evaluate on; the training manifest by default.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Fold whose novel classes are evaluated; the training fold by default.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Number of folds (defaults to the training setting)
    #[arg(long)]
    pub num_folds: Option<usize>,
    /// Support images per episode
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    /// Episodes per run; the checkpoint's setting by default.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Number of runs; run r samples with seed + r
    #[arg(long)]
    pub runs: Option<usize>,
    /// Seed of the first run
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pooled intersection/union counts or mean of per-episode IoU
    #[arg(long, value_enum)]
    pub iou_mode: Option<IouMode>,
    /// Input side (defaults to the training side)
    #[arg(long)]
    pub side: Option<usize>,
    /// Prediction threads
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    /// Checkpoint to visualize
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON episode description.
    #[arg(long)]
    pub episode: PathBuf,
    /// Side of one montage tile in pixels
    #[arg(long, default_value_t = 32)]
    pub tile_size: usize,
    /// Draw only the cells classified as foreground.
    #[arg(long)]
    pub fg_only: bool,
    /// Output directory
    #[arg(long, default_value = "viz")]
    pub out: PathBuf,
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec { num_classes: a.classes, images_per_class: a.per_class, image_size: a.size, noise: a.noise, seed: a.seed };
    let m = generate_synthetic_dataset(&spec, &a.out)?;
    println!("wrote {} images of {} classes to {}", m.entries.len(), m.class_names.len(), a.out.join("manifest.json").display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.resolve()?;
    eprintln!("{}", serde_json::to_string(&cfg)?);
    let out = trainer::train(&cfg)?;
    if let Some(last) = out.log.last() {
        println!(
            "step {} epoch {}: pixel {:.4} grid {:.4} total {:.4}",
            last.step, last.epoch, last.loss_pixel, last.loss_grid, last.loss_total
        );
    }
    println!("checkpoint {}", out.checkpoint.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(&a.ckpt)?;
    let (model, cfg) = trainer::restore_model(&ckpt)?;
    let ec = EvalConfig {
        fold: a.fold.unwrap_or(cfg.fold),
        num_folds: a.num_folds.unwrap_or(cfg.num_folds),
        shots: a.shots,
        episodes: a.episodes.unwrap_or(cfg.eval_episodes),
        runs: a.runs.unwrap_or(cfg.eval_runs),
        seed: a.seed,
        iou_mode: a.iou_mode.unwrap_or(cfg.iou_mode),
        side: a.side,
        workers: a.workers,
    };
    ec.validate()?;
    let manifest_path = a.dataset.clone().unwrap_or(cfg.dataset.clone());
    let ds = crate::episodes::Dataset::open(&manifest_path)?;
    let report = trainer::evaluate_model(&model, &cfg, &ds, &ec)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.table(&ds.manifest.class_names));
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = &a.out {
        std::fs::write(p, json).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn viz(a: &VizArgs) -> Result<()> {
    let spec = EpisodeSpec::load(&a.episode)?;
    if a.tile_size == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    let root = a.episode.parent().map(PathBuf::from).unwrap_or_default();
    let episode = spec.episode(&root)?;
    let (model, cfg) = trainer::load_model(&a.ckpt)?;
    let (pred, cells, masks) = model.predict(&episode.resized(cfg.side)?)?;
    let mut written = write_visualizations(&a.out, &episode.query_image, &pred, &cells, &masks, a.tile_size, a.fg_only)?;
    let cfg_path = a.out.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    written.push(cfg_path);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Viz(a) => viz(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
