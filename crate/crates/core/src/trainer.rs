//! Episodic training, checkpointing and few-shot evaluation.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{BackboneConfig, BackboneKind};
use crate::checkpoint::{Checkpoint, OptimizerState, RngState};
use crate::episodes::{augment_pair, build_folds, AugmentConfig, Dataset, Episode, MIN_SIDE};
use crate::error::{ensure, Error, Result};
use crate::imaging::Mask;
use crate::losses::{self, LossReport, PixelLossKind};
use crate::metrics::{IouMode, MetricsAccumulator, MetricsReport};
use crate::model::{Batch, Manet, ModelConfig};
use crate::optim::Adam;
use crate::params::ParamGroup;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset manifest.
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub fold: usize,
    pub num_folds: usize,
    pub shots: usize,
    /// Side length every training image is resized to.
    pub side: usize,
    /// Episodes per optimizer step.
    pub batch: usize,
    pub lr: f64,
    /// Weight of the grid loss.
    pub lambda: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Seeds initialization and episode sampling.
    pub seed: u64,
    /// Episode preparation threads; 0 prepares inline.
    pub workers: usize,
    pub pixel_loss: PixelLossKind,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    /// Evaluation defaults recorded with the checkpoint.
    pub iou_mode: IouMode,
    pub eval_episodes: usize,
    pub eval_runs: usize,
    /// Checkpoint to continue from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("data/manifest.json"),
            out_dir: PathBuf::from("runs/default"),
            fold: 0,
            num_folds: 4,
            shots: 1,
            side: 473,
            batch: 4,
            lr: 1e-4,
            lambda: 1.0,
            epochs: 50,
            episodes_per_epoch: 200,
            seed: 0,
            workers: 0,
            pixel_loss: PixelLossKind::Bce,
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            backbone: BackboneConfig::default(),
            iou_mode: IouMode::Pooled,
            eval_episodes: 1000,
            eval_runs: 5,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.side >= MIN_SIDE, Config, "side {} below {MIN_SIDE}", self.side);
        ensure!(self.batch >= 1, Config, "batch must be at least 1");
        ensure!(self.shots >= 1, Config, "shots must be at least 1");
        ensure!(self.lr.is_finite() && self.lr > 0.0, Config, "learning rate must be positive");
        ensure!(self.lambda.is_finite() && self.lambda >= 0.0, Config, "lambda must be non-negative");
        ensure!(self.epochs >= 1 && self.episodes_per_epoch >= 1, Config, "need at least one epoch and one episode");
        ensure!(self.num_folds >= 1 && self.fold < self.num_folds, Config, "fold {} out of range 0..{}", self.fold, self.num_folds);
        self.model.validate()?;
        self.backbone.validate()
    }

    /// Initialization seeds follow the run seed.
    pub fn seeded(mut self) -> Self {
        self.model.seed = self.seed;
        self.backbone.seed = self.seed;
        self
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.episodes_per_epoch.div_ceil(self.batch)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss_pixel: f64,
    pub loss_grid: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub episode_seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Manet<f32>,
    pub config: TrainConfig,
    pub log: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

/// Samples, resizes and augments the episodes of one step.
pub fn prepare_episodes(dataset: &Dataset, classes: &[u32], cfg: &TrainConfig, seed: u64, n: usize) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let ep = dataset.sample_episode(classes, cfg.shots, &mut rng)?.resized(cfg.side)?;
            let (query_image, query_mask) = augment_pair(&ep.query_image, &ep.query_mask, &cfg.augment, &mut rng);
            let support = ep
                .support
                .iter()
                .map(|(img, m)| {
                    let (a, b) = augment_pair(img, m, &cfg.augment, &mut rng);
                    if b.count() == 0 {
                        (img.clone(), m.clone())
                    } else {
                        (a, b)
                    }
                })
                .collect();
            Ok(Episode { query_image, query_mask, support, ..ep })
        })
        .collect()
}

/// Runs `prepare` for every job, on `workers` threads when non-zero, and
/// hands the results to `consume` in job order.
fn pipeline<J: Sync, P, C>(jobs: &[J], workers: usize, prepare: P, mut consume: C) -> Result<()>
where
    P: Fn(&J) -> Result<Vec<Episode>> + Sync,
    C: FnMut(usize, Vec<Episode>) -> Result<()>,
{
    if workers == 0 {
        for (i, j) in jobs.iter().enumerate() {
            consume(i, prepare(j)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|s| {
        let prepare = &prepare;
        let receivers: Vec<_> = (0..workers)
            .map(|w| {
                let (tx, rx) = sync_channel(2);
                s.spawn(move || {
                    for j in jobs.iter().skip(w).step_by(workers) {
                        if tx.send(prepare(j)).is_err() {
                            break;
                        }
                    }
                });
                rx
            })
            .collect();
        for i in 0..jobs.len() {
            let eps = receivers[i % workers].recv().map_err(|_| Error::Contract("episode worker stopped".into()))??;
            consume(i, eps)?;
        }
        Ok(())
    })
}

/// One optimizer step on a batch of prepared episodes.
pub fn train_step(model: &mut Manet<f32>, adam: &mut Adam<f32>, episodes: &[Episode], cfg: &TrainConfig) -> Result<LossReport> {
    let batch = Batch::<f32>::from_episodes(episodes, model.backbone_config.mean, model.backbone_config.std)?;
    let gt: Vec<Mask> = episodes.iter().map(|e| e.query_mask.clone()).collect();
    let (h, w) = (gt[0].height, gt[0].width);
    let (report, grads) = {
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let out = model.forward_graph(&mut g, &p, &batch, (h, w))?;
        let loss = losses::attach(&mut g, &out, &gt, model.config.grid, cfg.lambda, cfg.pixel_loss)?;
        let report = loss.report(&g, cfg.lambda);
        if !(report.pixel.is_finite() && report.grid.is_finite() && report.total.is_finite()) {
            return Ok(report);
        }
        let mut grads = g.backward(loss.total);
        let mut collected = Vec::new();
        for id in model.params.ids() {
            if let Some(t) = grads.take(p.var(id)) {
                let group = model.params.params()[id.index()].group;
                ensure!(model.is_trainable(group), Contract, "frozen parameter {} received a gradient", model.params.params()[id.index()].name);
                collected.push((id, t));
            }
        }
        (report, collected)
    };
    adam.update(&mut model.params, &grads);
    Ok(report)
}

/// Names of the parameters stored in checkpoints: everything that is not
/// read from a pretrained weight file.
fn saved_param_indices(model: &Manet<f32>) -> Vec<usize> {
    let keep_backbone = model.backbone_config.kind == BackboneKind::Tiny;
    model
        .params
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.group == ParamGroup::Head || keep_backbone)
        .map(|(i, _)| i)
        .collect()
}

pub fn capture_checkpoint(model: &Manet<f32>, adam: &Adam<f32>, cfg: &TrainConfig, epoch: u64, rng: &ChaCha8Rng) -> Result<Checkpoint<f32>> {
    let idx = saved_param_indices(model);
    let ps = model.params.params();
    Ok(Checkpoint {
        config: serde_json::to_value(cfg)?,
        epoch,
        step: adam.step,
        rng: RngState::capture(rng),
        params: idx.iter().map(|&i| (ps[i].name.clone(), ps[i].value.clone())).collect(),
        optimizer: Some(OptimizerState {
            lr: adam.lr,
            step: adam.step,
            m: idx.iter().map(|&i| adam.m[i].clone()).collect(),
            v: idx.iter().map(|&i| adam.v[i].clone()).collect(),
        }),
    })
}

/// Rebuilds the network (and its training configuration) from a checkpoint.
pub fn restore_model(ckpt: &Checkpoint<f32>) -> Result<(Manet<f32>, TrainConfig)> {
    let cfg: TrainConfig = serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = Manet::new(cfg.model.clone(), cfg.backbone.clone())?;
    for (name, t) in &ckpt.params {
        let id = model.params.find(name).ok_or_else(|| Error::Format(format!("checkpoint parameter {name} unknown to the model")))?;
        let dst = model.params.get_mut(id);
        ensure!(dst.shape() == t.shape(), Format, "parameter {name}: stored {:?}, model {:?}", t.shape(), dst.shape());
        *dst = t.clone();
    }
    Ok((model, cfg))
}

fn restore_adam(ckpt: &Checkpoint<f32>, model: &Manet<f32>) -> Result<Adam<f32>> {
    let Some(o) = &ckpt.optimizer else {
        return Err(Error::Format("checkpoint has no optimizer state to resume from".into()));
    };
    let mut adam = Adam::new(o.lr, &model.params);
    adam.step = o.step;
    for (k, (name, _)) in ckpt.params.iter().enumerate() {
        let i = model.params.find(name).expect("restored parameter").index();
        adam.m[i] = o.m[k].clone();
        adam.v[i] = o.v[k].clone();
    }
    Ok(adam)
}

/// Loads a checkpoint file into a network.
pub fn load_model(path: &Path) -> Result<(Manet<f32>, TrainConfig)> {
    restore_model(&Checkpoint::load(path)?)
}

fn append_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Episodic training on the train classes of the configured fold.
///
/// Writes `config.json`, `train_log.jsonl`, `checkpoint_epochNNN.bin` and
/// `checkpoint.bin` (the latest epoch) to `out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let dataset = Dataset::open(&cfg.dataset)?;
    train_on(cfg, &dataset)
}

/// [`train`] with an already loaded dataset.
pub fn train_on(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let cfg = cfg.clone().seeded();
    cfg.validate()?;
    let folds = build_folds(&dataset.manifest.class_ids(), cfg.fold, cfg.num_folds)?;
    let classes = folds.train_classes;
    dataset.check_classes(&classes, cfg.shots)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join("train_log.jsonl");

    let (mut model, mut adam, mut rng, start_epoch) = match &cfg.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (model, stored) = restore_model(&ckpt)?;
            ensure!(
                stored.model == cfg.model && stored.backbone == cfg.backbone,
                Config,
                "resumed checkpoint was trained with a different model configuration"
            );
            let adam = restore_adam(&ckpt, &model)?;
            (model, adam, ckpt.rng.restore(), ckpt.epoch as usize)
        }
        None => {
            let model = Manet::<f32>::new(cfg.model.clone(), cfg.backbone.clone())?;
            let adam = Adam::new(cfg.lr, &model.params);
            let _ = std::fs::remove_file(&log_path);
            (model, adam, ChaCha8Rng::seed_from_u64(cfg.seed), 0)
        }
    };
    adam.lr = cfg.lr;
    let cfg_path = cfg.out_dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::io(&cfg_path, e))?;

    let mut log = Vec::new();
    let mut latest = cfg.out_dir.join("checkpoint.bin");
    let per_step = cfg.batch;
    for epoch in start_epoch..cfg.epochs {
        let steps = cfg.steps_per_epoch();
        let jobs: Vec<(u64, usize)> = (0..steps)
            .map(|s| {
                let n = per_step.min(cfg.episodes_per_epoch - s * per_step);
                (rng.next_u64(), n)
            })
            .collect();
        let mut records = Vec::with_capacity(steps);
        pipeline(
            &jobs,
            cfg.workers,
            |&(seed, n)| prepare_episodes(dataset, &classes, &cfg, seed, n),
            |i, episodes| {
                let report = train_step(&mut model, &mut adam, &episodes, &cfg)?;
                let seed = jobs[i].0;
                if !report.total.is_finite() || !report.pixel.is_finite() || !report.grid.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: adam.step + 1,
                        episode_seed: seed,
                        pixel: report.pixel,
                        grid: report.grid,
                        total: report.total,
                    });
                }
                records.push(StepRecord {
                    step: adam.step,
                    epoch: epoch as u64,
                    loss_pixel: report.pixel,
                    loss_grid: report.grid,
                    loss_total: report.total,
                    lr: adam.lr,
                    episode_seed: seed,
                });
                Ok(())
            },
        )?;
        append_log(&log_path, &records)?;
        log.extend(records);
        let ckpt = capture_checkpoint(&model, &adam, &cfg, epoch as u64 + 1, &rng)?;
        ckpt.save(&cfg.out_dir.join(format!("checkpoint_epoch{:03}.bin", epoch + 1)))?;
        latest = cfg.out_dir.join("checkpoint.bin");
        ckpt.save(&latest)?;
    }
    Ok(TrainOutcome { model, config: cfg, log, checkpoint: latest })
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub fold: usize,
    pub num_folds: usize,
    pub shots: usize,
    /// Episodes per run.
    pub episodes: usize,
    pub runs: usize,
    /// Run `r` samples its episodes with seed `seed + r`.
    pub seed: u64,
    pub iou_mode: IouMode,
    /// Input side; the model's training side when absent.
    pub side: Option<usize>,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { fold: 0, num_folds: 4, shots: 1, episodes: 1000, runs: 5, seed: 0, iou_mode: IouMode::Pooled, side: None, workers: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.shots >= 1, Config, "shots must be at least 1");
        ensure!(self.episodes >= 1 && self.runs >= 1, Config, "need at least one run of one episode");
        ensure!(self.num_folds >= 1 && self.fold < self.num_folds, Config, "fold {} out of range 0..{}", self.fold, self.num_folds);
        Ok(())
    }
}

/// Trivial predictors used as reference points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    AllForeground,
    AllBackground,
}

impl Baseline {
    pub fn predict(&self, episode: &Episode) -> Mask {
        let (h, w) = episode.original_size;
        Mask::from_fn(h, w, |_, _| *self == Baseline::AllForeground)
    }
}

/// Evaluates an arbitrary predictor on test-class episodes. The predictor
/// receives episodes at their original resolution and must return a mask of
/// the query's size.
pub fn evaluate_predictor<P>(dataset: &Dataset, ec: &EvalConfig, predict: P) -> Result<MetricsReport>
where
    P: Fn(&Episode) -> Result<Mask> + Sync,
{
    ec.validate()?;
    let folds = build_folds(&dataset.manifest.class_ids(), ec.fold, ec.num_folds)?;
    let classes = folds.test_classes;
    dataset.check_classes(&classes, ec.shots)?;
    const CHUNK: usize = 32;
    let mut runs = Vec::with_capacity(ec.runs);
    for r in 0..ec.runs {
        let seed = ec.seed + r as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = MetricsAccumulator::new();
        let mut left = ec.episodes;
        while left > 0 {
            let n = left.min(CHUNK);
            left -= n;
            let eps = (0..n).map(|_| dataset.sample_episode(&classes, ec.shots, &mut rng)).collect::<Result<Vec<_>>>()?;
            let preds = predict_all(&eps, ec.workers, &predict)?;
            for (ep, pred) in eps.iter().zip(&preds) {
                acc.update(pred, &ep.query_mask, ep.class_id)?;
            }
        }
        runs.push((seed, acc));
    }
    let mut report = MetricsReport::from_runs(&runs, ec.iou_mode)?;
    report.fold = Some(ec.fold);
    report.shots = Some(ec.shots);
    Ok(report)
}

fn predict_all<P>(eps: &[Episode], workers: usize, predict: &P) -> Result<Vec<Mask>>
where
    P: Fn(&Episode) -> Result<Mask> + Sync,
{
    if workers <= 1 {
        return eps.iter().map(predict).collect();
    }
    let chunk = eps.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = eps.chunks(chunk).map(|c| s.spawn(move || c.iter().map(predict).collect::<Result<Vec<_>>>())).collect();
        let mut out = Vec::with_capacity(eps.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Contract("evaluation worker panicked".into()))??);
        }
        Ok(out)
    })
}

/// Evaluates a trained network on the test classes of `ec.fold`.
pub fn evaluate_model(model: &Manet<f32>, train_cfg: &TrainConfig, dataset: &Dataset, ec: &EvalConfig) -> Result<MetricsReport> {
    let side = ec.side.unwrap_or(train_cfg.side);
    ensure!(side >= MIN_SIDE, Config, "side {side} below {MIN_SIDE}");
    let mut report = evaluate_predictor(dataset, ec, |ep| {
        let (pred, _, _) = model.predict(&ep.resized(side)?)?;
        Ok(pred.binary_mask)
    })?;
    report.head_params = Some(model.head_param_count());
    report.config = Some(serde_json::to_value(train_cfg)?);
    if train_cfg.fold != ec.fold || train_cfg.num_folds != ec.num_folds {
        report.warnings.push(format!(
            "checkpoint was trained on fold {} of {}, evaluating fold {} of {}",
            train_cfg.fold, train_cfg.num_folds, ec.fold, ec.num_folds
        ));
    }
    Ok(report)
}

/// Loads a checkpoint and evaluates it; the dataset defaults to the one the
/// checkpoint was trained on.
pub fn evaluate_checkpoint(path: &Path, dataset: Option<&Path>, ec: &EvalConfig) -> Result<MetricsReport> {
    let (model, cfg) = load_model(path)?;
    let ds = Dataset::open(dataset.unwrap_or(&cfg.dataset))?;
    evaluate_model(&model, &cfg, &ds, ec)
}
