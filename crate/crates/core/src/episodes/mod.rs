//! Datasets, class folds and episode sampling.

mod adapters;
mod augment;
mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imaging::{read_label_map, Mask, RgbImage};

pub use adapters::{coco_manifest, pascal_voc_manifest, COCO_CLASSES, VOC_CLASSES};
pub use augment::{augment_pair, Affine, AugmentConfig, MAX_ROTATION_DEG, MAX_SHIFT, SCALE_RANGE};
pub use synth::{generate_synthetic_dataset, render, ShapeKind, SynthSpec};

/// Smallest foreground fraction of an image usable as a support.
pub const MIN_SUPPORT_FRACTION: f64 = 0.01;

/// Smallest side an episode may be resized to.
pub const MIN_SIDE: usize = 64;

/// How the mask file of a manifest entry encodes its classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Values above 127 are foreground of every listed class.
    #[default]
    Binary,
    /// Each pixel holds a class id; 0 and 255 are background and ignore.
    Label,
}

impl MaskKind {
    fn is_binary(&self) -> bool {
        *self == MaskKind::Binary
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub classes: Vec<u32>,
    #[serde(default, skip_serializing_if = "MaskKind::is_binary")]
    pub mask_kind: MaskKind,
}

/// Dataset description; entry paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: BTreeMap<u32, String>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.class_names.is_empty(), Config, "manifest declares no classes");
        ensure!(!self.class_names.contains_key(&0), Config, "class id 0 is reserved for background");
        for (i, e) in self.entries.iter().enumerate() {
            ensure!(!e.classes.is_empty(), Config, "entry {i} ({}) lists no classes", e.image.display());
            for c in &e.classes {
                ensure!(self.class_names.contains_key(c), Config, "entry {i} uses undeclared class {c}");
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Sorted class ids.
    pub fn class_ids(&self) -> Vec<u32> {
        self.class_names.keys().copied().collect()
    }
}

/// Disjoint train and test classes of one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold: usize,
    pub num_folds: usize,
    pub train_classes: Vec<u32>,
    pub test_classes: Vec<u32>,
}

/// Splits the sorted class ids into `num_folds` contiguous blocks; block
/// `fold` is held out for testing.
pub fn build_folds(class_ids: &[u32], fold: usize, num_folds: usize) -> Result<FoldSpec> {
    ensure!(num_folds >= 1, Config, "need at least one fold");
    ensure!(fold < num_folds, Config, "fold {fold} out of range 0..{num_folds}");
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ensure!(
        !ids.is_empty() && ids.len() % num_folds == 0,
        Config,
        "{} classes do not split into {num_folds} equal folds",
        ids.len()
    );
    let b = ids.len() / num_folds;
    let test_classes = ids[fold * b..(fold + 1) * b].to_vec();
    let train_classes = ids.iter().copied().filter(|c| !test_classes.contains(c)).collect();
    Ok(FoldSpec { fold, num_folds, train_classes, test_classes })
}

/// One support/query task with binary masks for `class_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub query_image: RgbImage,
    pub query_mask: Mask,
    pub support: Vec<(RgbImage, Mask)>,
    pub class_id: u32,
    /// `(height, width)` of the query before any resizing.
    pub original_size: (usize, usize),
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }

    /// Resizes every image (bilinear) and mask (nearest) to `side x side`,
    /// keeping `original_size`.
    pub fn resized(&self, side: usize) -> Result<Episode> {
        ensure!(side >= MIN_SIDE, Config, "episode side {side} below {MIN_SIDE}");
        Ok(Episode {
            query_image: self.query_image.resized(side, side),
            query_mask: self.query_mask.resized(side, side),
            support: self.support.iter().map(|(i, m)| (i.resized(side, side), m.resized(side, side))).collect(),
            class_id: self.class_id,
            original_size: self.original_size,
        })
    }
}

/// Label map of one entry kept in memory.
#[derive(Clone, Debug)]
struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
    kind: MaskKind,
}

impl LabelMap {
    fn binary(&self, class_id: u32) -> Mask {
        let fg = |v: u8| match self.kind {
            MaskKind::Binary => v > 127,
            MaskKind::Label => v as u32 == class_id,
        };
        Mask { height: self.height, width: self.width, data: self.data.iter().map(|&v| fg(v) as u8).collect() }
    }
}

/// Which entries contain a class and which of them may act as supports.
#[derive(Clone, Debug, Default)]
pub struct ClassPool {
    pub images: Vec<usize>,
    pub supports: Vec<usize>,
}

/// Indices drawn for one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeDraw {
    pub class_id: u32,
    pub query: usize,
    pub support: Vec<usize>,
}

/// A manifest with every image and mask decoded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Vec<RgbImage>,
    labels: Vec<LabelMap>,
    pools: BTreeMap<u32, ClassPool>,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        Self::from_manifest(DatasetManifest::load(manifest_path)?)
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let mut images = Vec::with_capacity(manifest.entries.len());
        let mut labels = Vec::with_capacity(manifest.entries.len());
        let mut pools: BTreeMap<u32, ClassPool> = manifest.class_names.keys().map(|&c| (c, ClassPool::default())).collect();
        for (i, e) in manifest.entries.iter().enumerate() {
            let img = RgbImage::load(&manifest.resolve(&e.image))?;
            let (height, width, data) = read_label_map(&manifest.resolve(&e.mask))?;
            ensure!(
                (height, width) == (img.height, img.width),
                Config,
                "mask {} is {height}x{width} but its image is {}x{}",
                e.mask.display(),
                img.height,
                img.width
            );
            let label = LabelMap { height, width, data, kind: e.mask_kind };
            for &c in &e.classes {
                let m = label.binary(c);
                let pool = pools.get_mut(&c).expect("validated class");
                if m.count() > 0 {
                    pool.images.push(i);
                }
                if m.fraction() >= MIN_SUPPORT_FRACTION {
                    pool.supports.push(i);
                }
            }
            images.push(img);
            labels.push(label);
        }
        Ok(Dataset { manifest, images, labels, pools })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pool(&self, class_id: u32) -> Option<&ClassPool> {
        self.pools.get(&class_id)
    }

    pub fn image(&self, i: usize) -> &RgbImage {
        &self.images[i]
    }

    pub fn mask(&self, i: usize, class_id: u32) -> Mask {
        self.labels[i].binary(class_id)
    }

    /// Checks that every class can form a `shots`-shot episode.
    pub fn check_classes(&self, classes: &[u32], shots: usize) -> Result<()> {
        ensure!(!classes.is_empty(), Sampling, "empty class pool");
        for &c in classes {
            let pool = self.pools.get(&c).ok_or_else(|| Error::Sampling(format!("class {c} is not in the dataset")))?;
            ensure!(
                pool.images.len() > shots,
                Sampling,
                "class {c} has {} images, {}-shot episodes need {}",
                pool.images.len(),
                shots,
                shots + 1
            );
            ensure!(
                pool.supports.len() >= shots,
                Sampling,
                "class {c} has {} images with at least {:.0}% foreground, {}-shot episodes need {}",
                pool.supports.len(),
                MIN_SUPPORT_FRACTION * 100.0,
                shots,
                shots
            );
        }
        Ok(())
    }

    /// Draws a class uniformly, then a query and `shots` distinct supports.
    pub fn draw<R: Rng>(&self, classes: &[u32], shots: usize, rng: &mut R) -> Result<EpisodeDraw> {
        ensure!(shots >= 1, Config, "shots must be at least 1");
        self.check_classes(classes, shots)?;
        let class_id = classes[rng.random_range(0..classes.len())];
        let pool = &self.pools[&class_id];
        let query = pool.images[rng.random_range(0..pool.images.len())];
        let candidates: Vec<usize> = pool.supports.iter().copied().filter(|&i| i != query).collect();
        ensure!(
            candidates.len() >= shots,
            Sampling,
            "class {class_id}: only {} support candidates besides the query, need {shots}",
            candidates.len()
        );
        let support = sample(rng, candidates.len(), shots).into_iter().map(|j| candidates[j]).collect();
        Ok(EpisodeDraw { class_id, query, support })
    }

    pub fn materialize(&self, d: &EpisodeDraw) -> Episode {
        let q = &self.images[d.query];
        Episode {
            query_image: q.clone(),
            query_mask: self.mask(d.query, d.class_id),
            support: d.support.iter().map(|&i| (self.images[i].clone(), self.mask(i, d.class_id))).collect(),
            class_id: d.class_id,
            original_size: (q.height, q.width),
        }
    }

    pub fn sample_episode<R: Rng>(&self, classes: &[u32], shots: usize, rng: &mut R) -> Result<Episode> {
        let d = self.draw(classes, shots, rng)?;
        Ok(self.materialize(&d))
    }
}
