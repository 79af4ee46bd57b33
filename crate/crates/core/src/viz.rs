//! Images of what the head predicts: the grid of cell masks and the final
//! segmentation over the query.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage as Canvas};
use serde::{Deserialize, Serialize};

use crate::episodes::{Episode, MaskKind};
use crate::error::{ensure, Error, Result};
use crate::imaging::{read_label_map, Mask, RgbImage};
use crate::kernels::resize_bilinear;
use crate::model::{CellLogits, MaskStack, Prediction};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const HIGHLIGHT: Rgb<u8> = Rgb([255, 64, 32]);

/// `S x S` tiles of `tile` pixels, tile `(i, j)` showing `sigmoid` of mask
/// plane `i * S + j` in grey. Cells whose foreground probability exceeds 0.5
/// get a coloured frame; with `fg_only` the other tiles stay black.
pub fn mask_montage<T: Scalar>(cells: &CellLogits<T>, masks: &MaskStack<T>, tile: usize, fg_only: bool) -> Result<Canvas> {
    let s = cells.grid();
    let ms = masks.logits.shape();
    ensure!(ms.len() == 3 && ms[0] == s * s, Contract, "mask stack {:?} does not match a {s}x{s} grid", ms);
    ensure!(tile >= 1, Config, "tile size must be at least 1");
    let probs = cells.fg_probs();
    let side = (tile * s) as u32;
    let mut canvas = Canvas::new(side, side);
    let (mh, mw) = (ms[1], ms[2]);
    for k in 0..s * s {
        let fg = probs[k] > T::lit(0.5);
        if fg_only && !fg {
            continue;
        }
        let plane = Tensor::from_vec(&[1, 1, mh, mw], masks.logits.data()[k * mh * mw..(k + 1) * mh * mw].to_vec())?;
        let small = resize_bilinear(&plane, tile, tile);
        let (ti, tj) = (k / s, k % s);
        for y in 0..tile {
            for x in 0..tile {
                let v = small[y * tile + x].as_f64();
                let g = (255.0 / (1.0 + (-v).exp())).round() as u8;
                let edge = y == 0 || x == 0 || y + 1 == tile || x + 1 == tile;
                let px = if fg && edge { HIGHLIGHT } else { Rgb([g, g, g]) };
                canvas.put_pixel((tj * tile + x) as u32, (ti * tile + y) as u32, px);
            }
        }
    }
    Ok(canvas)
}

/// Query image with the predicted foreground tinted.
pub fn overlay(image: &RgbImage, prediction: &Mask) -> Result<Canvas> {
    ensure!(
        (image.height, image.width) == (prediction.height, prediction.width),
        Contract,
        "overlay mask {}x{} vs image {}x{}",
        prediction.height,
        prediction.width,
        image.height,
        image.width
    );
    let mut canvas = image.to_rgb8();
    for (x, y, px) in canvas.enumerate_pixels_mut() {
        if prediction.get(y as usize, x as usize) {
            for (c, t) in px.0.iter_mut().zip(HIGHLIGHT.0) {
                *c = ((*c as u16 + t as u16) / 2) as u8;
            }
        }
    }
    Ok(canvas)
}

/// Writes `montage.png`, `overlay.png` and `mask.png` to `out_dir`.
pub fn write_visualizations<T: Scalar>(
    out_dir: &Path,
    query: &RgbImage,
    prediction: &Prediction<T>,
    cells: &CellLogits<T>,
    masks: &MaskStack<T>,
    tile: usize,
    fg_only: bool,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let montage = out_dir.join("montage.png");
    mask_montage(cells, masks, tile, fg_only)?.save(&montage).map_err(|e| Error::image(&montage, e))?;
    let over = out_dir.join("overlay.png");
    overlay(query, &prediction.binary_mask)?.save(&over).map_err(|e| Error::image(&over, e))?;
    let mask = out_dir.join("mask.png");
    prediction.binary_mask.save(&mask)?;
    Ok(vec![montage, over, mask])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Episode described by file paths relative to the description's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub query: ImageRef,
    pub support: Vec<ImageRef>,
    #[serde(default = "default_class")]
    pub class_id: u32,
    #[serde(default)]
    pub mask_kind: MaskKind,
}

fn default_class() -> u32 {
    1
}

impl EpisodeSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let spec: EpisodeSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        ensure!(!spec.support.is_empty(), Config, "{}: at least one support image is required", path.display());
        Ok(spec)
    }

    fn load_mask(&self, path: &Path) -> Result<Mask> {
        let (height, width, raw) = read_label_map(path)?;
        let fg = |v: u8| match self.mask_kind {
            MaskKind::Binary => v > 127,
            MaskKind::Label => v as u32 == self.class_id,
        };
        Ok(Mask { height, width, data: raw.iter().map(|&v| fg(v) as u8).collect() })
    }

    /// Reads the referenced files; `root` is the directory of the description.
    pub fn episode(&self, root: &Path) -> Result<Episode> {
        let load = |r: &ImageRef| -> Result<(RgbImage, Mask)> {
            let img = RgbImage::load(&root.join(&r.image))?;
            let mask = self.load_mask(&root.join(&r.mask))?;
            ensure!((img.height, img.width) == (mask.height, mask.width), Config, "{} and its mask differ in size", r.image.display());
            Ok((img, mask))
        };
        let (query_image, query_mask) = load(&self.query)?;
        let support = self.support.iter().map(load).collect::<Result<Vec<_>>>()?;
        let original_size = (query_image.height, query_image.width);
        Ok(Episode { query_image, query_mask, support, class_id: self.class_id, original_size })
    }
}
