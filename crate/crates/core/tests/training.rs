mod common;

use manet::checkpoint::Checkpoint;
use manet::metrics::MetricsReport;
use manet::model::{Manet, ModelConfig};
use manet::params::ParamGroup;
use manet::trainer::{evaluate_model, evaluate_predictor, load_model, train_on, Baseline, EvalConfig, StepRecord, TrainConfig};

fn tiny_config(out: &std::path::Path) -> TrainConfig {
    TrainConfig {
        out_dir: out.to_path_buf(),
        side: 64,
        batch: 2,
        lr: 1e-3,
        epochs: 2,
        episodes_per_epoch: 6,
        seed: 17,
        model: ModelConfig { head_channels: 16, grid: 6, ..ModelConfig::default() },
        ..TrainConfig::default()
    }
}

fn read_log(dir: &std::path::Path) -> Vec<StepRecord> {
    std::fs::read_to_string(dir.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn identical_runs_match_bit_for_bit() {
    let ds = common::small_dataset();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny_config(a.path());
    cfg.epochs = 1;
    cfg.episodes_per_epoch = 2;
    let ra = train_on(&cfg, ds).unwrap();
    cfg.out_dir = b.path().to_path_buf();
    let rb = train_on(&cfg, ds).unwrap();
    assert_eq!(ra.log, rb.log);
    let (ca, cb) = (Checkpoint::<f32>::load(&ra.checkpoint).unwrap(), Checkpoint::<f32>::load(&rb.checkpoint).unwrap());
    assert_eq!(ca.params, cb.params);
    assert_eq!(ca.optimizer, cb.optimizer);
    assert_eq!(ca.rng, cb.rng);
    assert_eq!(std::fs::read(a.path().join("train_log.jsonl")).unwrap(), std::fs::read(b.path().join("train_log.jsonl")).unwrap());
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let ds = common::small_dataset();
    let (full, part) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_config(full.path());
    let whole = train_on(&cfg, ds).unwrap();

    let mut first = tiny_config(part.path());
    first.epochs = 1;
    train_on(&first, ds).unwrap();
    let mut rest = tiny_config(part.path());
    rest.resume = Some(part.path().join("checkpoint_epoch001.bin"));
    let resumed = train_on(&rest, ds).unwrap();

    assert_eq!(resumed.log, whole.log[whole.log.len() - resumed.log.len()..]);
    assert_eq!(read_log(part.path()), whole.log);
    let (a, b) = (Checkpoint::<f32>::load(&whole.checkpoint).unwrap(), Checkpoint::<f32>::load(&resumed.checkpoint).unwrap());
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!((a.epoch, a.step, &a.rng), (b.epoch, b.step, &b.rng));
}

#[test]
fn frozen_backbone_does_not_move_over_an_epoch() {
    let ds = common::small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.epochs = 1;
    cfg.backbone.frozen = true;
    let out = train_on(&cfg, ds).unwrap();
    let init = Manet::<f32>::new(out.config.model.clone(), out.config.backbone.clone()).unwrap();
    assert_eq!(out.model.params.max_abs_diff(&init.params, ParamGroup::Backbone), 0.0);
    assert!(out.model.params.max_abs_diff(&init.params, ParamGroup::Head) > 0.0);
    // the reloaded network is the trained one
    let (reloaded, _) = load_model(&out.checkpoint).unwrap();
    assert_eq!(reloaded.params, out.model.params);
}

#[test]
fn loss_decreases_over_two_hundred_steps() {
    let ds = common::small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.batch = 1;
    cfg.epochs = 1;
    cfg.episodes_per_epoch = 200;
    let log = train_on(&cfg, ds).unwrap().log;
    assert_eq!(log.len(), 200);
    let window = |r: &[StepRecord]| r.iter().map(|s| s.loss_total).sum::<f64>() / r.len() as f64;
    let (first, last) = (window(&log[..20]), window(&log[180..]));
    println!("mean total loss: first 20 steps {first:.4}, last 20 steps {last:.4}");
    assert!(last < first);
}

#[test]
fn logged_total_is_pixel_plus_weighted_grid() {
    let ds = common::small_dataset();
    for lambda in [0.0, 0.5, 1.0, 3.0] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.epochs = 1;
        cfg.lambda = lambda;
        let log = train_on(&cfg, ds).unwrap().log;
        for r in &log {
            let f32_total = r.loss_pixel as f32 + r.loss_grid as f32 * lambda as f32;
            assert_eq!(r.loss_total as f32, f32_total, "{r:?}");
            assert!((r.loss_total - (r.loss_pixel + lambda * r.loss_grid)).abs() <= 1e-6 * r.loss_total.abs().max(1.0));
        }
        if lambda == 0.0 {
            assert!(log.iter().all(|r| r.loss_total == r.loss_pixel && r.loss_grid > 0.0));
            let line = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
            assert!(line.lines().next().unwrap().contains("\"loss_grid\""));
        }
    }
}

fn eval_config() -> EvalConfig {
    EvalConfig { episodes: 40, runs: 2, seed: 3, ..EvalConfig::default() }
}

#[test]
fn untrained_head_is_near_chance() {
    let ds = common::small_dataset();
    let ec = eval_config();
    let fg = evaluate_predictor(ds, &ec, |e| Ok(Baseline::AllForeground.predict(e))).unwrap();
    let bg = evaluate_predictor(ds, &ec, |e| Ok(Baseline::AllBackground.predict(e))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let model = Manet::<f32>::new(cfg.model.clone(), cfg.backbone.clone()).unwrap();
    let report = evaluate_model(&model, &cfg, ds, &ec).unwrap();
    println!("all-fg {:.4}, all-bg {:.4}, untrained {:.4}", fg.miou, bg.miou, report.miou);
    assert!(report.miou < 0.35);
    assert_eq!(bg.miou, 0.0);
}

#[test]
fn identical_five_shot_evaluation_equals_one_shot() {
    let ds = common::small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.epochs = 1;
    let model = train_on(&cfg, ds).unwrap().model;
    let ec = eval_config();
    let run = |k: usize| -> MetricsReport {
        evaluate_predictor(ds, &ec, |ep| {
            let mut e = ep.resized(cfg.side)?;
            e.support = vec![e.support[0].clone(); k];
            Ok(model.predict(&e)?.0.binary_mask)
        })
        .unwrap()
    };
    let one = run(1);
    let five = run(5);
    assert_eq!(serde_json::to_string(&one).unwrap(), serde_json::to_string(&five).unwrap());
}

#[test]
fn evaluation_is_reproducible_and_warns_on_fold_mismatch() {
    let ds = common::small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let model = Manet::<f32>::new(cfg.model.clone(), cfg.backbone.clone()).unwrap();
    let a = evaluate_model(&model, &cfg, ds, &eval_config()).unwrap();
    let b = evaluate_model(&model, &cfg, ds, &eval_config()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.warnings.is_empty());
    let other = evaluate_model(&model, &cfg, ds, &EvalConfig { fold: 1, ..eval_config() }).unwrap();
    assert_eq!(other.warnings.len(), 1);
}
