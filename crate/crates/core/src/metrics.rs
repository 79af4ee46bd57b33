//! Intersection-over-union bookkeeping for few-shot evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imaging::Mask;

/// Per-episode IoU values are accumulated in fixed point so that the
/// accumulator does not depend on update order.
const IOU_SCALE: f64 = 1e12;

/// How class IoU is formed from the evaluated episodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum IouMode {
    /// Sum intersections and unions over all episodes of a class.
    #[default]
    Pooled,
    /// Average the per-episode IoU values of a class.
    Mean,
}

/// IoU of two binary masks; two empty masks agree perfectly.
pub fn binary_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt, true)?;
    Ok(ratio(i, u))
}

fn ratio(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Intersection and union of the `fg` label between two masks.
fn intersection_union(pred: &Mask, gt: &Mask, fg: bool) -> Result<(u64, u64)> {
    ensure!(
        (pred.height, pred.width) == (gt.height, gt.width),
        Contract,
        "prediction {}x{} vs ground truth {}x{}",
        pred.height,
        pred.width,
        gt.height,
        gt.width
    );
    let v = fg as u8;
    let (mut i, mut u) = (0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (p == v, g == v);
        i += (a && b) as u64;
        u += (a || b) as u64;
    }
    Ok((i, u))
}

/// Running counts for one class or one label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
    /// Sum of per-episode IoU in units of `1e-12`.
    pub iou_fixed: u64,
    pub episodes: u64,
}

impl IouCounts {
    fn add(&mut self, i: u64, u: u64) {
        self.intersection += i;
        self.union += u;
        self.iou_fixed += (ratio(i, u) * IOU_SCALE).round() as u64;
        self.episodes += 1;
    }

    fn merge(&mut self, other: &IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
        self.iou_fixed += other.iou_fixed;
        self.episodes += other.episodes;
    }

    pub fn iou(&self, mode: IouMode) -> f64 {
        match mode {
            IouMode::Pooled => ratio(self.intersection, self.union),
            IouMode::Mean if self.episodes == 0 => 1.0,
            IouMode::Mean => self.iou_fixed as f64 / IOU_SCALE / self.episodes as f64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub per_class: BTreeMap<u32, IouCounts>,
    pub foreground: IouCounts,
    pub background: IouCounts,
    pub episodes_seen: u64,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one episode's prediction for `class_id`.
    pub fn update(&mut self, pred: &Mask, gt: &Mask, class_id: u32) -> Result<()> {
        ensure!(pred.is_binary() && gt.is_binary(), Contract, "masks must be binary");
        let (fi, fu) = intersection_union(pred, gt, true)?;
        let (bi, bu) = intersection_union(pred, gt, false)?;
        self.per_class.entry(class_id).or_default().add(fi, fu);
        self.foreground.add(fi, fu);
        self.background.add(bi, bu);
        self.episodes_seen += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        for (c, counts) in &other.per_class {
            self.per_class.entry(*c).or_default().merge(counts);
        }
        self.foreground.merge(&other.foreground);
        self.background.merge(&other.background);
        self.episodes_seen += other.episodes_seen;
    }

    pub fn class_iou(&self, mode: IouMode) -> BTreeMap<u32, f64> {
        self.per_class.iter().map(|(c, n)| (*c, n.iou(mode))).collect()
    }

    /// Mean over the classes seen of the class IoU.
    pub fn miou(&self, mode: IouMode) -> f64 {
        let ious = self.class_iou(mode);
        if ious.is_empty() {
            return 0.0;
        }
        ious.values().sum::<f64>() / ious.len() as f64
    }

    /// Mean of the foreground and background IoU.
    pub fn fb_iou(&self, mode: IouMode) -> f64 {
        0.5 * (self.foreground.iou(mode) + self.background.iou(mode))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub miou: f64,
    pub fb_iou: f64,
    pub episodes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Aggregated evaluation result over one or more seeded runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_mode: IouMode,
    pub fold: Option<usize>,
    pub shots: Option<usize>,
    /// mIoU of the pooled episodes of all runs.
    pub miou: f64,
    pub fb_iou: f64,
    pub per_class_iou: BTreeMap<u32, f64>,
    pub runs: Vec<RunSummary>,
    pub miou_over_runs: MeanStd,
    pub fb_iou_over_runs: MeanStd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_params: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricsReport {
    /// Builds a report from one accumulator per seeded run.
    pub fn from_runs(runs: &[(u64, MetricsAccumulator)], mode: IouMode) -> Result<Self> {
        ensure!(!runs.is_empty(), Contract, "no evaluation runs");
        let mut all = MetricsAccumulator::new();
        let summaries: Vec<RunSummary> = runs
            .iter()
            .map(|(seed, acc)| {
                all.merge(acc);
                RunSummary { seed: *seed, miou: acc.miou(mode), fb_iou: acc.fb_iou(mode), episodes: acc.episodes_seen }
            })
            .collect();
        let mious: Vec<f64> = summaries.iter().map(|r| r.miou).collect();
        let fbs: Vec<f64> = summaries.iter().map(|r| r.fb_iou).collect();
        Ok(MetricsReport {
            iou_mode: mode,
            fold: None,
            shots: None,
            miou: all.miou(mode),
            fb_iou: all.fb_iou(mode),
            per_class_iou: all.class_iou(mode),
            runs: summaries,
            miou_over_runs: MeanStd::of(&mious),
            fb_iou_over_runs: MeanStd::of(&fbs),
            head_params: None,
            config: None,
            warnings: Vec::new(),
        })
    }

    /// Human-readable summary table.
    pub fn table(&self, class_names: &BTreeMap<u32, String>) -> String {
        let mut out = String::new();
        let title = match (self.fold, self.shots) {
            (Some(f), Some(k)) => format!("fold {f}, {k}-shot"),
            _ => "evaluation".to_string(),
        };
        let _ = writeln!(out, "{title} ({:?} IoU)", self.iou_mode);
        let _ = writeln!(out, "{:<6} {:<16} {:>8}", "class", "name", "IoU");
        for (c, iou) in &self.per_class_iou {
            let name = class_names.get(c).map(String::as_str).unwrap_or("-");
            let _ = writeln!(out, "{c:<6} {name:<16} {:>8.4}", iou);
        }
        let _ = writeln!(out, "{:<6} {:<16} {:>8}", "run", "seed", "mIoU");
        for (i, r) in self.runs.iter().enumerate() {
            let _ = writeln!(out, "{i:<6} {:<16} {:>8.4}", r.seed, r.miou);
        }
        let _ = writeln!(out, "mIoU    {:.4} (runs {:.4} +/- {:.4})", self.miou, self.miou_over_runs.mean, self.miou_over_runs.std);
        let _ = writeln!(out, "FB-IoU  {:.4} (runs {:.4} +/- {:.4})", self.fb_iou, self.fb_iou_over_runs.mean, self.fb_iou_over_runs.std);
        if let Some(n) = self.head_params {
            let _ = writeln!(out, "head parameters {n}");
        }
        out
    }
}
