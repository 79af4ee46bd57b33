//! Procedural shape dataset: one class per shape kind, pixel-exact masks.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ManifestEntry, MaskKind, MIN_SUPPORT_FRACTION};
use crate::error::{ensure, Error, Result};
use crate::imaging::{Mask, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Star,
    Diamond,
    Hexagon,
    Crescent,
    Ellipse,
    LShape,
    Arrow,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 12] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Star,
        ShapeKind::Diamond,
        ShapeKind::Hexagon,
        ShapeKind::Crescent,
        ShapeKind::Ellipse,
        ShapeKind::LShape,
        ShapeKind::Arrow,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Star => "star",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Hexagon => "hexagon",
            ShapeKind::Crescent => "crescent",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::LShape => "l-shape",
            ShapeKind::Arrow => "arrow",
        }
    }

    /// Membership in shape-local coordinates where the shape spans roughly
    /// the unit disk.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs().max(v.abs()) <= 0.8,
            ShapeKind::Triangle => regular_polygon(u, v, 3),
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Cross => {
                let (a, b) = (u.abs(), v.abs());
                (a <= 0.3 && b <= 0.95) || (b <= 0.3 && a <= 0.95)
            }
            ShapeKind::Star => {
                let pts: Vec<(f64, f64)> = (0..10)
                    .map(|i| {
                        let r = if i % 2 == 0 { 1.0 } else { 0.45 };
                        let t = -PI / 2.0 + i as f64 * PI / 5.0;
                        (r * t.cos(), r * t.sin())
                    })
                    .collect();
                in_polygon(u, v, &pts)
            }
            ShapeKind::Diamond => u.abs() / 0.65 + v.abs() <= 1.0,
            ShapeKind::Hexagon => regular_polygon(u, v, 6),
            ShapeKind::Crescent => u * u + v * v <= 1.0 && (u - 0.5).powi(2) + v * v > 0.6,
            ShapeKind::Ellipse => u * u + (v / 0.45).powi(2) <= 1.0,
            ShapeKind::LShape => {
                in_polygon(u, v, &[(-0.8, -0.9), (-0.2, -0.9), (-0.2, 0.3), (0.8, 0.3), (0.8, 0.9), (-0.8, 0.9)])
            }
            ShapeKind::Arrow => in_polygon(
                u,
                v,
                &[(-0.9, -0.25), (0.1, -0.25), (0.1, -0.7), (0.95, 0.0), (0.1, 0.7), (0.1, 0.25), (-0.9, 0.25)],
            ),
        }
    }
}

fn regular_polygon(u: f64, v: f64, n: usize) -> bool {
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let t = -PI / 2.0 + 2.0 * PI * i as f64 / n as f64;
            (t.cos(), t.sin())
        })
        .collect();
    in_polygon(u, v, &pts)
}

/// Even-odd ray casting.
fn in_polygon(x: f64, y: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { num_classes: 8, images_per_class: 40, image_size: 96, noise: 0.04, seed: 0 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (1..=ShapeKind::ALL.len()).contains(&self.num_classes),
            Config,
            "number of shape classes must be in 1..={}",
            ShapeKind::ALL.len()
        );
        ensure!(self.images_per_class >= 1, Config, "need at least one image per class");
        ensure!(self.image_size >= 64, Config, "image size {} below 64", self.image_size);
        ensure!(self.noise.is_finite() && self.noise >= 0.0, Config, "noise must be a non-negative number");
        Ok(())
    }
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Renders one image containing one or two instances of `shape`.
pub fn render(shape: ShapeKind, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> (RgbImage, Mask) {
    let n = size as f64;
    loop {
        let bg = color(rng);
        let mut fg = color(rng);
        while distance(bg, fg) < 0.4 {
            fg = color(rng);
        }
        let grad = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
        let instances = if rng.random_bool(0.25) { 2 } else { 1 };
        let mut placed = Vec::new();
        for _ in 0..instances {
            let r = rng.random_range(0.14..0.28) * n;
            let c = (rng.random_range(0.25..0.75) * n, rng.random_range(0.25..0.75) * n);
            let rot: f64 = rng.random_range(0.0..2.0 * PI);
            placed.push((c, r, rot.sin_cos()));
        }
        let mask = Mask::from_fn(size, size, |y, x| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            placed.iter().any(|&((cx, cy), r, (sin, cos))| {
                let (dx, dy) = ((px - cx) / r, (py - cy) / r);
                shape.contains(cos * dx + sin * dy, -sin * dx + cos * dy)
            })
        });
        if mask.fraction() < MIN_SUPPORT_FRACTION || mask.fraction() > 0.6 {
            continue;
        }
        let gauss = Normal::new(0.0, noise.max(1e-12)).expect("valid deviation");
        let mut img = RgbImage::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let shade = grad[0] * (x as f64 / n - 0.5) + grad[1] * (y as f64 / n - 0.5);
                let base = if mask.get(y, x) { fg } else { bg };
                for (c, b) in base.iter().enumerate() {
                    let e = if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
                    img.set(c, y, x, (b + shade + e).clamp(0.0, 1.0) as f32);
                }
            }
        }
        return (img, mask);
    }
}

/// Writes `images/`, `masks/`, `manifest.json` and `synth.json` under `out_dir` and returns
/// the manifest. Output bytes depend only on `spec`.
pub fn generate_synthetic_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::new();
    let mut class_names = BTreeMap::new();
    for (ci, shape) in ShapeKind::ALL.iter().take(spec.num_classes).enumerate() {
        let class_id = ci as u32 + 1;
        class_names.insert(class_id, shape.name().to_string());
        for k in 0..spec.images_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((class_id as u64) << 32 | k as u64);
            let (img, mask) = render(*shape, spec.image_size, spec.noise, &mut rng);
            let stem = format!("{}_{:04}", shape.name(), k);
            let image = PathBuf::from("images").join(format!("{stem}.png"));
            let mask_path = PathBuf::from("masks").join(format!("{stem}.png"));
            img.save(&out_dir.join(&image))?;
            mask.save(&out_dir.join(&mask_path))?;
            entries.push(ManifestEntry { image, mask: mask_path, classes: vec![class_id], mask_kind: MaskKind::Binary });
        }
    }
    let manifest = DatasetManifest { entries, class_names, root: out_dir.to_path_buf() };
    manifest.save(&out_dir.join("manifest.json"))?;
    let spec_path = out_dir.join("synth.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifest)
}
