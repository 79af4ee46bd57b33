//! Support prototypes (masked global average pooling), the normalized
//! high-level correlation map, and K-shot fusion.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imaging::Mask;
use crate::kernels::nearest_index;
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;

/// Shared stabilizer of the min-max normalizations.
pub const EPSILON: f64 = 1e-7;

/// Class vector pooled from support foreground features.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype<T> {
    pub vector: Vec<T>,
}

/// Per-position similarity of the query to the support foreground, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap<T> {
    /// `[h, w]`
    pub values: Tensor<T>,
}

/// Order of normalization and averaging when several shots are fused.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShotFusion {
    /// Normalize each shot's map, then average the normalized maps.
    #[default]
    MeanOfNormalized,
    /// Average the raw maxima, then normalize once.
    NormalizeMean,
}

/// Nearest-neighbour downsampling of a support mask to feature resolution.
///
/// When the downsampled mask loses every foreground cell, the foreground pixel
/// nearest to the full-resolution centroid is kept instead. An empty input mask
/// is a [`Error::DegenerateSupport`].
pub fn support_cells(mask: &Mask, h: usize, w: usize) -> Result<Vec<u8>> {
    let count = mask.count();
    if count == 0 {
        return Err(Error::DegenerateSupport("support mask has no foreground pixel".into()));
    }
    let mut cells = vec![0u8; h * w];
    for y in 0..h {
        let sy = nearest_index(y, mask.height, h);
        for x in 0..w {
            cells[y * w + x] = mask.get(sy, nearest_index(x, mask.width, w)) as u8;
        }
    }
    if cells.iter().all(|&c| c == 0) {
        let (mut cy, mut cx) = (0.0, 0.0);
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(y, x) {
                    cy += y as f64;
                    cx += x as f64;
                }
            }
        }
        cy /= count as f64;
        cx /= count as f64;
        let mut best = (f64::INFINITY, 0, 0);
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(y, x) {
                    let d = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    if d < best.0 {
                        best = (d, y, x);
                    }
                }
            }
        }
        let fy = (best.1 * h / mask.height).min(h - 1);
        let fx = (best.2 * w / mask.width).min(w - 1);
        cells[fy * w + fx] = 1;
    }
    Ok(cells)
}

/// Pooling weights `mask / (sum(mask) + eps)` for [`masked_gap`].
pub fn gap_weights<T: Scalar>(cells: &[u8]) -> Vec<T> {
    let denom = T::from_usize(cells.iter().map(|&c| c as usize).sum()).unwrap() + T::lit(EPSILON);
    cells.iter().map(|&c| T::from_u8(c).unwrap() / denom).collect()
}

/// `sum_p feat(p) * mask(p) / (sum_p mask(p) + eps)` over a `[c, h, w]` map.
pub fn masked_gap<T: Scalar>(features: &Tensor<T>, cells: &[u8]) -> Result<Prototype<T>> {
    let shape = features.shape();
    ensure!(shape.len() == 3, Contract, "features must be [c, h, w], got {:?}", shape);
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    ensure!(cells.len() == hw, Contract, "mask has {} cells, features {}", cells.len(), hw);
    if cells.iter().all(|&v| v == 0) {
        return Err(Error::DegenerateSupport("downsampled support mask is empty".into()));
    }
    let weights = gap_weights::<T>(cells);
    let vector = (0..c)
        .map(|ch| {
            features.data()[ch * hw..(ch + 1) * hw]
                .iter()
                .zip(&weights)
                .map(|(&f, &w)| f * w)
                .sum()
        })
        .collect();
    Ok(Prototype { vector })
}

/// Unit-normalizes each column of a `[c, n]` matrix; zero columns stay zero.
fn unit_columns<T: Scalar>(m: &[T], c: usize, n: usize) -> Vec<T> {
    let mut out = m.to_vec();
    for j in 0..n {
        let norm = (0..c).map(|i| m[i * n + j] * m[i * n + j]).sum::<T>().sqrt();
        for i in 0..c {
            out[i * n + j] = if norm > T::zero() { m[i * n + j] / norm } else { T::zero() };
        }
    }
    out
}

/// For each query position, the maximum cosine similarity to any foreground
/// support position. Both inputs are `[c, hw]` slices.
///
/// Returns the raw scores and the winning support position per query position.
pub fn raw_correlation<T: Scalar>(query: &[T], support: &[T], c: usize, hw: usize, cells: &[u8]) -> (Vec<T>, Vec<usize>) {
    let fg: Vec<usize> = (0..hw).filter(|&p| cells[p] != 0).collect();
    assert!(!fg.is_empty(), "raw_correlation needs a foreground cell");
    let qn = unit_columns(query, c, hw);
    let mut gathered = vec![T::zero(); c * fg.len()];
    for i in 0..c {
        for (j, &p) in fg.iter().enumerate() {
            gathered[i * fg.len() + j] = support[i * hw + p];
        }
    }
    let sn = unit_columns(&gathered, c, fg.len());
    let mut cos = vec![T::zero(); hw * fg.len()];
    gemm(T::one(), Mat::t(&qn, c, hw), Mat::new(&sn, c, fg.len()), T::zero(), &mut cos);
    let mut raw = Vec::with_capacity(hw);
    let mut arg = Vec::with_capacity(hw);
    for row in cos.chunks(fg.len()) {
        let (mut best, mut best_j) = (row[0], 0);
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_j = j;
            }
        }
        raw.push(best);
        arg.push(fg[best_j]);
    }
    (raw, arg)
}

/// `(x - min) / (max - min + eps)`; also returns the argmin and argmax.
pub fn min_max_normalize<T: Scalar>(values: &[T]) -> (Vec<T>, usize, usize) {
    let (mut lo, mut hi) = (0usize, 0usize);
    for (i, &v) in values.iter().enumerate() {
        if v < values[lo] {
            lo = i;
        }
        if v > values[hi] {
            hi = i;
        }
    }
    let (mn, mx) = (values[lo], values[hi]);
    let denom = mx - mn + T::lit(EPSILON);
    (values.iter().map(|&v| (v - mn) / denom).collect(), lo, hi)
}

/// Normalized correlation map between `[c, h, w]` high-level features.
pub fn correlation_map<T: Scalar>(query_high: &Tensor<T>, support_high: &Tensor<T>, cells: &[u8]) -> Result<CorrelationMap<T>> {
    let shape = query_high.shape();
    ensure!(shape.len() == 3, Contract, "features must be [c, h, w], got {:?}", shape);
    ensure!(shape == support_high.shape(), Contract, "query/support feature shapes differ");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    ensure!(cells.len() == h * w, Contract, "mask/feature size mismatch");
    if cells.iter().all(|&v| v == 0) {
        return Err(Error::DegenerateSupport("downsampled support mask is empty".into()));
    }
    let (raw, _) = raw_correlation(query_high.data(), support_high.data(), c, h * w, cells);
    let (norm, _, _) = min_max_normalize(&raw);
    Ok(CorrelationMap { values: Tensor::from_vec(&[h, w], norm)? })
}

/// Elementwise mean of K prototypes and K correlation maps.
pub fn fuse_shots<T: Scalar>(prototypes: &[Prototype<T>], maps: &[CorrelationMap<T>]) -> Result<(Prototype<T>, CorrelationMap<T>)> {
    ensure!(!prototypes.is_empty(), Contract, "fuse_shots needs at least one shot");
    ensure!(prototypes.len() == maps.len(), Contract, "prototype/map count mismatch");
    let dim = prototypes[0].vector.len();
    let shape = maps[0].values.shape().to_vec();
    let mut vector = prototypes[0].vector.clone();
    let mut values = maps[0].values.clone();
    // running mean, so identical shots fuse to exactly their common value
    for (i, (p, m)) in prototypes.iter().zip(maps).enumerate().skip(1) {
        ensure!(p.vector.len() == dim, Contract, "prototype length mismatch");
        ensure!(m.values.shape() == shape.as_slice(), Contract, "map shape mismatch");
        let k = T::from_usize(i + 1).unwrap();
        for (a, &b) in vector.iter_mut().zip(&p.vector) {
            *a += (b - *a) / k;
        }
        for (a, &b) in values.data_mut().iter_mut().zip(m.values.data()) {
            *a += (b - *a) / k;
        }
    }
    Ok((Prototype { vector }, CorrelationMap { values }))
}
