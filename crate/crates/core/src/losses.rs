//! Pixel loss, grid targets, grid loss and the combined objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::correlation::min_max_normalize;
use crate::error::{ensure, Result};
use crate::imaging::Mask;
use crate::model::{CellLogits, Outputs};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Form of the pixel loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelLossKind {
    /// Full binary cross-entropy.
    #[default]
    Bce,
    /// Only the `-y log p` term.
    PositiveOnly,
}

/// Normalized per-cell foreground coverage `[S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTarget<T> {
    pub values: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pixel: f64,
    pub grid: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Mean pixel loss of a score map in `(0, 1)` against a binary mask.
pub fn pixel_loss<T: Scalar>(score: &Tensor<T>, gt: &Mask, kind: PixelLossKind) -> Result<T> {
    ensure!(
        score.shape() == [gt.height, gt.width],
        Contract,
        "score map {:?} vs mask {}x{}",
        score.shape(),
        gt.height,
        gt.width
    );
    let mut g = Graph::new();
    let s = g.constant(score.clone());
    let l = g.bce(s, gt.to_tensor::<T>().into_data(), kind == PixelLossKind::PositiveOnly);
    Ok(g.value(l)[0])
}

/// Row or column range of cell `i` out of `s` over `n` pixels.
#[inline]
pub fn cell_range(i: usize, s: usize, n: usize) -> std::ops::Range<usize> {
    (i * n / s)..((i + 1) * n / s)
}

/// Per-cell mean of the mask over an `S x S` partition, min-max normalized.
pub fn grid_target<T: Scalar>(gt: &Mask, s: usize) -> Result<GridTarget<T>> {
    ensure!(s >= 1 && gt.height >= s && gt.width >= s, Contract, "mask {}x{} smaller than grid {s}", gt.height, gt.width);
    let mut means = Vec::with_capacity(s * s);
    for i in 0..s {
        let rows = cell_range(i, s, gt.height);
        for j in 0..s {
            let cols = cell_range(j, s, gt.width);
            let mut fg = 0usize;
            for y in rows.clone() {
                for x in cols.clone() {
                    fg += gt.get(y, x) as usize;
                }
            }
            let area = rows.len() * cols.len();
            means.push(T::from_usize(fg).unwrap() / T::from_usize(area).unwrap());
        }
    }
    Ok(GridTarget { values: Tensor::from_vec(&[s, s], normalize_cells(&means))? })
}

/// Min-max normalization with the shared epsilon.
pub fn normalize_cells<T: Scalar>(means: &[T]) -> Vec<T> {
    min_max_normalize(means).0
}

/// `-(1/S^2) sum_i G_i log softmax(g_i)[fg]`.
pub fn grid_loss<T: Scalar>(cells: &CellLogits<T>, target: &GridTarget<T>) -> Result<T> {
    let s = cells.grid();
    ensure!(target.values.shape() == [s, s], Contract, "grid target shape {:?} vs grid {s}", target.values.shape());
    let mut g = Graph::new();
    let c = g.constant(cells.logits.clone().reshape(&[1, 2, s, s])?);
    let l = g.grid_nll(c, target.values.data().to_vec());
    Ok(g.value(l)[0])
}

/// `total = pixel + lambda * grid`.
pub fn total_loss(pixel: f64, grid: f64, lambda: f64) -> LossReport {
    LossReport { pixel, grid, total: pixel + lambda * grid, lambda }
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub pixel: Var,
    pub grid: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report<T: Scalar>(&self, g: &Graph<'_, T>, lambda: f64) -> LossReport {
        LossReport {
            pixel: g.value(self.pixel)[0].as_f64(),
            grid: g.value(self.grid)[0].as_f64(),
            total: g.value(self.total)[0].as_f64(),
            lambda,
        }
    }
}

/// Attaches pixel, grid and total losses to a forward pass whose score map
/// has the resolution of `gt_masks`.
pub fn attach<T: Scalar>(g: &mut Graph<'_, T>, out: &Outputs, gt_masks: &[Mask], grid: usize, lambda: f64, kind: PixelLossKind) -> Result<LossVars> {
    let (n, _, h, w) = g.value(out.score).dims4();
    ensure!(gt_masks.len() == n, Contract, "{} masks for a batch of {n}", gt_masks.len());
    let mut pixel_target = Vec::with_capacity(n * h * w);
    let mut grid_targets = Vec::with_capacity(n * grid * grid);
    for m in gt_masks {
        ensure!((m.height, m.width) == (h, w), Contract, "mask {}x{} vs score {h}x{w}", m.height, m.width);
        pixel_target.extend(m.data.iter().map(|&v| T::from_u8(v).unwrap()));
        grid_targets.extend_from_slice(grid_target::<T>(m, grid)?.values.data());
    }
    let pixel = g.bce(out.score, pixel_target, kind == PixelLossKind::PositiveOnly);
    let grid_l = g.grid_nll(out.cells, grid_targets);
    let weighted = g.scale(grid_l, T::lit(lambda));
    let total = g.add(pixel, weighted);
    Ok(LossVars { pixel, grid: grid_l, total })
}
