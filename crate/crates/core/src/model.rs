//! The two-branch head: per-cell foreground/background logits, one mask per
//! grid cell, and their aggregation into a single score map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::correlation::{gap_weights, support_cells, ShotFusion};
use crate::episodes::Episode;
use crate::error::{ensure, Result};
use crate::imaging::Mask;
use crate::kernels::ConvGeom;
use crate::layers::{Conv, ConvBlock, NORM_GROUPS};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clamp applied to the aggregated score map.
pub const SCORE_EPS: f64 = 1e-7;

/// How cell probabilities and mask planes are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// `sum_k p_k * sigmoid(m_k)`
    #[default]
    SigmoidFirst,
    /// `sigmoid(sum_k p_k * m_k)`
    LogitSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of the compressed features and of every head block.
    pub head_channels: usize,
    /// Grid side `S`.
    pub grid: usize,
    /// Append normalized x/y coordinates to the mask-branch input.
    pub coord_channels: bool,
    pub aggregation: Aggregation,
    pub shot_fusion: ShotFusion,
    /// Head initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            head_channels: 256,
            grid: 12,
            coord_channels: true,
            aggregation: Aggregation::SigmoidFirst,
            shot_fusion: ShotFusion::MeanOfNormalized,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((6..=48).contains(&self.grid), Config, "grid size {} outside 6..=48", self.grid);
        ensure!(
            self.head_channels >= NORM_GROUPS && self.head_channels % NORM_GROUPS == 0,
            Config,
            "head width {} must be a positive multiple of {}",
            self.head_channels,
            NORM_GROUPS
        );
        Ok(())
    }
}

/// Foreground/background logits per grid cell, stored `[2, S, S]`
/// (channel 0 background, channel 1 foreground).
#[derive(Clone, Debug, PartialEq)]
pub struct CellLogits<T> {
    pub logits: Tensor<T>,
}

impl<T: Scalar> CellLogits<T> {
    pub fn grid(&self) -> usize {
        self.logits.shape()[1]
    }

    /// `softmax(logits)[fg]` per cell as `[S, S]`.
    pub fn fg_probs(&self) -> Tensor<T> {
        let s = self.grid();
        let k = s * s;
        Tensor::from_fn(&[s, s], |c| {
            let d = self.logits[k + c] - self.logits[c];
            T::one() / (T::one() + (-d).exp())
        })
    }
}

/// Mask logit planes `[S^2, H_m, W_m]`; plane `k = i * S + j` belongs to cell `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack<T> {
    pub logits: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// `[H, W]` in `[eps, 1 - eps]` at the requested resolution.
    pub score_map: Tensor<T>,
    pub binary_mask: Mask,
    /// `[S, S]`
    pub cell_probs: Tensor<T>,
}

/// Normalized coordinates `[2, h, w]`: channel 0 is x, channel 1 is y, each
/// spaced linearly over `[-1, 1]`; a length-1 axis is 0.
pub fn coord_channels<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let lin = |i: usize, n: usize| {
        if n > 1 {
            T::lit(-1.0 + 2.0 * i as f64 / (n - 1) as f64)
        } else {
            T::zero()
        }
    };
    Tensor::from_fn(&[2, h, w], |idx| {
        let (c, p) = (idx / (h * w), idx % (h * w));
        if c == 0 {
            lin(p % w, w)
        } else {
            lin(p / w, h)
        }
    })
}

/// Score nodes for aggregated cell probabilities and mask planes.
fn aggregate_graph<T: Scalar>(g: &mut Graph<'_, T>, cells: Var, masks: Var, mode: Aggregation, out_hw: (usize, usize)) -> (Var, Var) {
    let probs = g.softmax_fg(cells);
    let score = match mode {
        Aggregation::SigmoidFirst => {
            let m = g.sigmoid(masks);
            g.weighted_sum(probs, m)
        }
        Aggregation::LogitSum => {
            let s = g.weighted_sum(probs, masks);
            g.sigmoid(s)
        }
    };
    let eps = T::lit(SCORE_EPS);
    let score = g.clamp(score, eps, T::one() - eps);
    let score = g.resize(score, out_hw.0, out_hw.1);
    (probs, score)
}

/// Combines cell categories with the cell masks and resizes to `out_hw`.
pub fn aggregate<T: Scalar>(cells: &CellLogits<T>, masks: &MaskStack<T>, out_hw: (usize, usize), mode: Aggregation) -> Result<Prediction<T>> {
    let s = cells.grid();
    ensure!(cells.logits.shape() == [2, s, s], Contract, "cell logits must be [2, S, S]");
    let ms = masks.logits.shape();
    ensure!(ms.len() == 3 && ms[0] == s * s, Contract, "mask stack has {:?}, expected {} planes", ms, s * s);
    let mut g = Graph::new();
    let c = g.constant(cells.logits.clone().reshape(&[1, 2, s, s])?);
    let m = g.constant(masks.logits.clone().reshape(&[1, ms[0], ms[1], ms[2]])?);
    let (probs, score) = aggregate_graph(&mut g, c, m, mode, out_hw);
    let score_map = g.value(score).clone().reshape(&[out_hw.0, out_hw.1])?;
    let binary_mask = Mask::from_scores(out_hw.0, out_hw.1, score_map.data())?;
    Ok(Prediction {
        score_map,
        binary_mask,
        cell_probs: g.value(probs).clone().reshape(&[s, s])?,
    })
}

/// Normalized query and support images of a batch of episodes.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[n, 3, side, side]`
    pub query: Tensor<T>,
    /// `[n * shots, 3, side, side]`, shots of one episode contiguous.
    pub support: Tensor<T>,
    pub support_masks: Vec<Mask>,
    pub shots: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn from_episodes(episodes: &[Episode], mean: [f32; 3], std: [f32; 3]) -> Result<Self> {
        ensure!(!episodes.is_empty(), Contract, "empty batch");
        let shots = episodes[0].support.len();
        let (h, w) = (episodes[0].query_image.height, episodes[0].query_image.width);
        let mut queries = Vec::new();
        let mut supports = Vec::new();
        let mut support_masks = Vec::new();
        for ep in episodes {
            ensure!(ep.support.len() == shots, Contract, "mixed shot counts in one batch");
            ensure!((ep.query_image.height, ep.query_image.width) == (h, w), Contract, "mixed image sizes in one batch");
            queries.push(ep.query_image.normalized(mean, std));
            for (img, mask) in &ep.support {
                ensure!((img.height, img.width) == (h, w), Contract, "support size differs from query");
                supports.push(img.normalized(mean, std));
                support_masks.push(mask.clone());
            }
        }
        Ok(Batch {
            query: Tensor::stack(&queries)?,
            support: Tensor::stack(&supports)?,
            support_masks,
            shots,
        })
    }

    pub fn len(&self) -> usize {
        self.query.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph nodes produced by [`Manet::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `[n, 2, S, S]`
    pub cells: Var,
    /// `[n, S^2, 2h, 2w]`
    pub masks: Var,
    /// `[n, S^2]`
    pub probs: Var,
    /// `[n, 1, out_h, out_w]`
    pub score: Var,
    /// `[n, D]` fused prototypes.
    pub prototype: Var,
    /// `[n, 1, h, w]` fused correlation maps.
    pub correlation: Var,
}

#[derive(Clone, Debug)]
struct Head {
    compress: Conv,
    merge: Conv,
    category_blocks: Vec<ConvBlock>,
    category_out: Conv,
    mask_blocks: Vec<ConvBlock>,
    mask_out: Conv,
}

/// The full network: backbone, feature compression and both branches.
#[derive(Clone, Debug)]
pub struct Manet<T> {
    pub config: ModelConfig,
    pub backbone_config: BackboneConfig,
    pub params: ParamStore<T>,
    backbone: Backbone,
    head: Head,
}

impl<T: Scalar> Manet<T> {
    /// Builds and initializes the network; initialization is a pure function
    /// of the two seeds.
    pub fn new(config: ModelConfig, backbone_config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut brng = ChaCha8Rng::seed_from_u64(backbone_config.seed);
        let backbone = Backbone::build(&backbone_config, &mut params, &mut brng)?;
        let head = Self::build_head(&config, backbone.mid_channels(), &mut params);
        Ok(Manet { config, backbone_config, params, backbone, head })
    }

    /// Network around an already constructed backbone.
    pub fn with_backbone(config: ModelConfig, backbone_config: BackboneConfig, backbone: Backbone, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut params = params;
        let head = Self::build_head(&config, backbone.mid_channels(), &mut params);
        Ok(Manet { config, backbone_config, params, backbone, head })
    }

    fn build_head(config: &ModelConfig, mid_channels: usize, params: &mut ParamStore<T>) -> Head {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.head_channels;
        let s2 = config.grid * config.grid;
        let hg = ParamGroup::Head;
        let point = ConvGeom::new(1, 1, 0, 1);
        let block = ConvGeom::same(3, 1);
        let compress = Conv::new(params, &mut rng, "head.compress", hg, mid_channels, d, point);
        let merge = Conv::new(params, &mut rng, "head.category.merge", hg, 2 * d + 1, d, point);
        let category_blocks = (0..3)
            .map(|i| ConvBlock::new(params, &mut rng, &format!("head.category.block{i}"), hg, d, d, block))
            .collect();
        let category_out = Conv::new(params, &mut rng, "head.category.out", hg, d, 2, point);
        // prior of one foreground cell out of S^2, so the initial score map is not saturated
        params.get_mut(category_out.bias)[1] = T::lit(-((s2 - 1) as f64).ln());
        let mask_in = if config.coord_channels { d + 2 } else { d };
        let mask_blocks = (0..3)
            .map(|i| {
                let cin = if i == 0 { mask_in } else { d };
                ConvBlock::new(params, &mut rng, &format!("head.mask.block{i}"), hg, cin, d, block)
            })
            .collect();
        let mask_out = Conv::new(params, &mut rng, "head.mask.out", hg, d, s2, point);
        Head { compress, merge, category_blocks, category_out, mask_blocks, mask_out }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Number of scalar head parameters (the part always trained).
    pub fn head_param_count(&self) -> usize {
        self.params.count(ParamGroup::Head)
    }

    pub fn trainable_param_count(&self) -> usize {
        let bb = if self.backbone_config.trainable() { self.params.count(ParamGroup::Backbone) } else { 0 };
        self.head_param_count() + bb
    }

    /// Whether a parameter group receives gradients during training.
    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        group == ParamGroup::Head || self.backbone_config.trainable()
    }

    /// Binds every parameter into `g` with trainability from the configuration.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Bound {
        let bb = self.backbone_config.trainable();
        self.params.bind(g, |grp| grp == ParamGroup::Head || bb)
    }

    /// Compressed middle-level features `relu(conv1x1(mid))`.
    pub fn compress<'a>(&self, g: &mut Graph<'a, T>, p: &Bound, mid: Var) -> Var {
        let y = self.head.compress.forward(g, p, mid);
        g.relu(y)
    }

    /// `[n, D, h, w]`, `[n, D]`, `[n, 1, h, w]` → `[n, 2, S, S]` cell logits.
    pub fn category_branch_graph<'a>(&self, g: &mut Graph<'a, T>, p: &Bound, query: Var, prototype: Var, corr: Var) -> Var {
        let (_, _, h, w) = g.value(query).dims4();
        let expanded = g.expand(prototype, h, w);
        let x = g.concat(&[query, expanded, corr]);
        let x = self.head.merge.forward(g, p, x);
        let mut x = g.relu(x);
        x = g.resize(x, self.config.grid, self.config.grid);
        for block in &self.head.category_blocks {
            x = block.forward(g, p, x);
        }
        self.head.category_out.forward(g, p, x)
    }

    /// `[n, D, h, w]` → `[n, S^2, 2h, 2w]` mask logits.
    pub fn mask_branch_graph<'a>(&self, g: &mut Graph<'a, T>, p: &Bound, query: Var) -> Var {
        let (n, _, h, w) = g.value(query).dims4();
        let mut x = if self.config.coord_channels {
            let coords = coord_channels::<T>(h, w);
            let tiled = Tensor::from_fn(&[n, 2, h, w], |i| coords[i % (2 * h * w)]);
            let c = g.constant(tiled);
            g.concat(&[query, c])
        } else {
            query
        };
        for block in &self.head.mask_blocks {
            x = block.forward(g, p, x);
        }
        let x = g.resize(x, 2 * h, 2 * w);
        self.head.mask_out.forward(g, p, x)
    }

    /// Full forward pass of a batch, score map resized to `out_hw`.
    pub fn forward_graph<'a>(&self, g: &mut Graph<'a, T>, p: &Bound, batch: &Batch<T>, out_hw: (usize, usize)) -> Result<Outputs> {
        let n = batch.len();
        let k = batch.shots;
        ensure!(k >= 1, Contract, "episodes need at least one shot");
        ensure!(batch.support.shape()[0] == n * k, Contract, "support batch size mismatch");
        let q = g.constant(batch.query.clone());
        let s = g.constant(batch.support.clone());
        let (qmid, qhigh) = self.backbone.forward(g, p, q);
        let (smid, shigh) = self.backbone.forward(g, p, s);
        let qc = self.compress(g, p, qmid);
        let sc = self.compress(g, p, smid);
        let (_, _, h, w) = g.value(qc).dims4();
        let cells = batch
            .support_masks
            .iter()
            .map(|m| support_cells(m, h, w))
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<T> = cells.iter().flat_map(|c| gap_weights::<T>(c)).collect();
        let protos = g.masked_gap(sc, weights);
        let raw = g.corr_raw(qhigh, shigh, k, &cells);
        let correlation = match self.config.shot_fusion {
            ShotFusion::MeanOfNormalized => {
                let m = g.min_max_norm(raw);
                g.shot_mean(m, k)
            }
            ShotFusion::NormalizeMean => {
                let m = g.shot_mean(raw, k);
                g.min_max_norm(m)
            }
        };
        let prototype = g.shot_mean(protos, k);
        let cell_logits = self.category_branch_graph(g, p, qc, prototype, correlation);
        let masks = self.mask_branch_graph(g, p, qc);
        let (probs, score) = aggregate_graph(g, cell_logits, masks, self.config.aggregation, out_hw);
        Ok(Outputs { cells: cell_logits, masks, probs, score, prototype, correlation })
    }

    /// Evaluation-mode category branch on single-sample tensors
    /// (`[D, h, w]`, `[D]`, `[h, w]`).
    pub fn category_branch(&self, query: &Tensor<T>, prototype: &[T], corr: &Tensor<T>) -> Result<CellLogits<T>> {
        let sh = query.shape();
        ensure!(sh.len() == 3 && sh[0] == self.config.head_channels, Contract, "query features must be [D, h, w], got {:?}", sh);
        ensure!(prototype.len() == sh[0], Contract, "prototype length {} != {}", prototype.len(), sh[0]);
        ensure!(corr.shape() == [sh[1], sh[2]], Contract, "correlation map must be [h, w]");
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let q = g.constant(query.clone().reshape(&[1, sh[0], sh[1], sh[2]])?);
        let pr = g.constant(Tensor::from_vec(&[1, sh[0]], prototype.to_vec())?);
        let c = g.constant(corr.clone().reshape(&[1, 1, sh[1], sh[2]])?);
        let out = self.category_branch_graph(&mut g, &p, q, pr, c);
        let s = self.config.grid;
        Ok(CellLogits { logits: g.value(out).clone().reshape(&[2, s, s])? })
    }

    /// Evaluation-mode mask branch on `[D, h, w]` features.
    pub fn mask_branch(&self, query: &Tensor<T>) -> Result<MaskStack<T>> {
        let sh = query.shape();
        ensure!(sh.len() == 3 && sh[0] == self.config.head_channels, Contract, "query features must be [D, h, w], got {:?}", sh);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let q = g.constant(query.clone().reshape(&[1, sh[0], sh[1], sh[2]])?);
        let out = self.mask_branch_graph(&mut g, &p, q);
        let (_, c, h, w) = g.value(out).dims4();
        Ok(MaskStack { logits: g.value(out).clone().reshape(&[c, h, w])? })
    }

    /// Evaluation-mode prediction for one resized episode; the score map is
    /// restored to the episode's original query size.
    pub fn predict(&self, episode: &Episode) -> Result<(Prediction<T>, CellLogits<T>, MaskStack<T>)> {
        let batch = Batch::from_episodes(std::slice::from_ref(episode), self.backbone_config.mean, self.backbone_config.std)?;
        let out_hw = episode.original_size;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let o = self.forward_graph(&mut g, &p, &batch, out_hw)?;
        let s = self.config.grid;
        let score_map = g.value(o.score).clone().reshape(&[out_hw.0, out_hw.1])?;
        let binary_mask = Mask::from_scores(out_hw.0, out_hw.1, score_map.data())?;
        let cells = CellLogits { logits: g.value(o.cells).clone().reshape(&[2, s, s])? };
        let (_, c, h, w) = g.value(o.masks).dims4();
        let masks = MaskStack { logits: g.value(o.masks).clone().reshape(&[c, h, w])? };
        let cell_probs = g.value(o.probs).clone().reshape(&[s, s])?;
        Ok((Prediction { score_map, binary_mask, cell_probs }, cells, masks))
    }
}
