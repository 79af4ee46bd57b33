//! Feature extractors producing middle-level and high-level maps at stride 8.

use std::collections::HashMap;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::kernels::ConvGeom;
use crate::layers::ConvBlock;
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input-to-feature downscale factor of every backbone.
pub const STRIDE: usize = 8;

/// Mean and std of the ImageNet statistics pretrained residual networks expect.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Tiny,
    PretrainedResnet50,
    PretrainedResnet101,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub frozen: bool,
    pub seed: u64,
    /// Parameter file for the pretrained kinds.
    pub weights: Option<PathBuf>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Tiny,
            frozen: false,
            seed: 0,
            weights: None,
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl BackboneConfig {
    /// Frozen pretrained residual network with ImageNet normalization.
    pub fn pretrained(kind: BackboneKind, weights: PathBuf) -> Self {
        BackboneConfig {
            kind,
            frozen: true,
            seed: 0,
            weights: Some(weights),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// Whether the backbone receives gradient updates.
    pub fn set_trainable(mut self, flag: bool) -> Self {
        self.frozen = !flag;
        self
    }

    pub fn trainable(&self) -> bool {
        !self.frozen
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackboneKind::Tiny => Ok(()),
            _ => {
                ensure!(self.weights.is_some(), Config, "{:?} backbone needs a weights file", self.kind);
                ensure!(self.frozen, Config, "pretrained backbones are only supported frozen");
                Ok(())
            }
        }
    }
}

/// Spatial side of the feature maps for an input of side `side`.
pub fn feature_side(side: usize) -> usize {
    side.div_ceil(STRIDE)
}

/// Middle-level and high-level features of a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet<T> {
    /// `[n, c_mid, h, w]`
    pub mid: Tensor<T>,
    /// `[n, c_high, h, w]`
    pub high: Tensor<T>,
    pub stride: usize,
}

/// Three stride-2 stages (32/64/128 channels) plus a dilated stride-1 stage.
#[derive(Clone, Debug)]
pub struct TinyBackbone {
    stages: Vec<Vec<ConvBlock>>,
    high: Vec<ConvBlock>,
}

impl TinyBackbone {
    pub const WIDTHS: [usize; 3] = [32, 64, 128];

    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in Self::WIDTHS.iter().enumerate() {
            let name = format!("backbone.stage{}", i + 1);
            stages.push(vec![
                ConvBlock::new(store, rng, &format!("{name}.0"), ParamGroup::Backbone, cin, w, ConvGeom::same(3, 2)),
                ConvBlock::new(store, rng, &format!("{name}.1"), ParamGroup::Backbone, w, w, ConvGeom::same(3, 1)),
            ]);
            cin = w;
        }
        let dilated = ConvGeom::new(3, 1, 2, 2);
        let high = vec![
            ConvBlock::new(store, rng, "backbone.high.0", ParamGroup::Backbone, cin, cin, dilated),
            ConvBlock::new(store, rng, "backbone.high.1", ParamGroup::Backbone, cin, cin, dilated),
        ];
        TinyBackbone { stages, high }
    }

    fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, p: &Bound, images: Var) -> (Var, Var) {
        let mut x = images;
        let mut outs = Vec::new();
        for stage in &self.stages {
            for block in stage {
                x = block.forward(g, p, x);
            }
            outs.push(x);
        }
        let (_, _, h, w) = g.value(outs[2]).dims4();
        let s2 = g.resize(outs[1], h, w);
        let mid = g.concat(&[s2, outs[2]]);
        let mut high = outs[2];
        for block in &self.high {
            high = block.forward(g, p, high);
        }
        (mid, high)
    }
}

/// Convolution without bias followed by a folded batch-norm affine map.
#[derive(Clone, Debug)]
struct ConvAffine {
    weight: ParamId,
    scale: ParamId,
    shift: ParamId,
    geom: ConvGeom,
}

impl ConvAffine {
    fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, p: &Bound, x: Var, relu: bool) -> Var {
        let y = g.conv2d(x, p.var(self.weight), None, self.geom);
        let y = g.channel_affine(y, p.var(self.scale), p.var(self.shift));
        if relu {
            g.relu(y)
        } else {
            y
        }
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: ConvAffine,
    conv2: ConvAffine,
    conv3: ConvAffine,
    downsample: Option<ConvAffine>,
}

/// Residual network with dilated last two stages (output stride 8).
#[derive(Clone, Debug)]
pub struct ResNet {
    stem: ConvAffine,
    layers: Vec<Vec<Bottleneck>>,
}

/// One tensor per name in the torchvision state-dict naming scheme.
pub type WeightMap = HashMap<String, Tensor<f32>>;

fn resnet_blocks(kind: BackboneKind) -> [usize; 4] {
    match kind {
        BackboneKind::PretrainedResnet101 => [3, 4, 23, 3],
        _ => [3, 4, 6, 3],
    }
}

/// `(name, shape)` of every tensor a residual-network weight file must hold.
pub fn resnet_weight_shapes(kind: BackboneKind) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let bn = |out: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize| {
        for field in ["weight", "bias", "running_mean", "running_var"] {
            out.push((format!("{name}.{field}"), vec![c]));
        }
    };
    out.push(("conv1.weight".into(), vec![64, 3, 7, 7]));
    bn(&mut out, "bn1", 64);
    let mut inplanes = 64;
    for (li, &blocks) in resnet_blocks(kind).iter().enumerate() {
        let planes = 64 << li;
        for b in 0..blocks {
            let pre = format!("layer{}.{}", li + 1, b);
            out.push((format!("{pre}.conv1.weight"), vec![planes, inplanes, 1, 1]));
            bn(&mut out, &format!("{pre}.bn1"), planes);
            out.push((format!("{pre}.conv2.weight"), vec![planes, planes, 3, 3]));
            bn(&mut out, &format!("{pre}.bn2"), planes);
            out.push((format!("{pre}.conv3.weight"), vec![planes * 4, planes, 1, 1]));
            bn(&mut out, &format!("{pre}.bn3"), planes * 4);
            if b == 0 {
                out.push((format!("{pre}.downsample.0.weight"), vec![planes * 4, inplanes, 1, 1]));
                bn(&mut out, &format!("{pre}.downsample.1"), planes * 4);
            }
            inplanes = planes * 4;
        }
    }
    out
}

impl ResNet {
    fn load<T: Scalar>(kind: BackboneKind, weights: &WeightMap, store: &mut ParamStore<T>) -> Result<Self> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = weights
                .get(name)
                .ok_or_else(|| Error::Config(format!("weights file lacks tensor {name}")))?;
            ensure!(t.shape() == shape, Config, "tensor {name} has shape {:?}, expected {:?}", t.shape(), shape);
            Ok(t.cast())
        };
        let conv = |store: &mut ParamStore<T>, conv: &str, bn: &str, cin, cout, geom: ConvGeom| -> Result<ConvAffine> {
            let k = geom.kernel;
            let weight = store.add(format!("{conv}.weight"), fetch(&format!("{conv}.weight"), &[cout, cin, k, k])?, ParamGroup::Backbone);
            let gamma = fetch(&format!("{bn}.weight"), &[cout])?;
            let beta = fetch(&format!("{bn}.bias"), &[cout])?;
            let mean = fetch(&format!("{bn}.running_mean"), &[cout])?;
            let var = fetch(&format!("{bn}.running_var"), &[cout])?;
            let eps = T::lit(1e-5);
            let scale = Tensor::from_fn(&[cout], |c| gamma[c] / (var[c] + eps).sqrt());
            let shift = Tensor::from_fn(&[cout], |c| beta[c] - mean[c] * scale[c]);
            Ok(ConvAffine {
                weight,
                scale: store.add(format!("{bn}.scale"), scale, ParamGroup::Backbone),
                shift: store.add(format!("{bn}.shift"), shift, ParamGroup::Backbone),
                geom,
            })
        };
        let stem = conv(store, "conv1", "bn1", 3, 64, ConvGeom::new(7, 2, 3, 1))?;
        let mut layers = Vec::new();
        let mut inplanes = 64;
        let mut dilation = 1;
        for (li, &blocks) in resnet_blocks(kind).iter().enumerate() {
            let planes = 64 << li;
            // layer2 downsamples; layers 3 and 4 trade stride for dilation
            let (stride, previous) = match li {
                0 => (1, dilation),
                1 => (2, dilation),
                _ => {
                    let prev = dilation;
                    dilation *= 2;
                    (1, prev)
                }
            };
            let mut layer = Vec::new();
            for b in 0..blocks {
                let pre = format!("layer{}.{}", li + 1, b);
                let (s, d) = if b == 0 { (stride, previous) } else { (1, dilation) };
                let c1 = conv(store, &format!("{pre}.conv1"), &format!("{pre}.bn1"), inplanes, planes, ConvGeom::new(1, 1, 0, 1))?;
                let c2 = conv(store, &format!("{pre}.conv2"), &format!("{pre}.bn2"), planes, planes, ConvGeom::new(3, s, d, d))?;
                let c3 = conv(store, &format!("{pre}.conv3"), &format!("{pre}.bn3"), planes, planes * 4, ConvGeom::new(1, 1, 0, 1))?;
                let downsample = if b == 0 {
                    Some(conv(
                        store,
                        &format!("{pre}.downsample.0"),
                        &format!("{pre}.downsample.1"),
                        inplanes,
                        planes * 4,
                        ConvGeom::new(1, s, 0, 1),
                    )?)
                } else {
                    None
                };
                layer.push(Bottleneck { conv1: c1, conv2: c2, conv3: c3, downsample });
                inplanes = planes * 4;
            }
            layers.push(layer);
        }
        Ok(ResNet { stem, layers })
    }

    fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, p: &Bound, images: Var) -> (Var, Var) {
        let x = self.stem.forward(g, p, images, true);
        let mut x = g.max_pool(x, ConvGeom::new(3, 2, 1, 1));
        let mut outs = Vec::new();
        for layer in &self.layers {
            for block in layer {
                let identity = match &block.downsample {
                    Some(ds) => ds.forward(g, p, x, false),
                    None => x,
                };
                let y = block.conv1.forward(g, p, x, true);
                let y = block.conv2.forward(g, p, y, true);
                let y = block.conv3.forward(g, p, y, false);
                let y = g.add(y, identity);
                x = g.relu(y);
            }
            outs.push(x);
        }
        let (_, _, h, w) = g.value(outs[2]).dims4();
        let l2 = g.resize(outs[1], h, w);
        let mid = g.concat(&[l2, outs[2]]);
        (mid, outs[3])
    }
}

/// A feature extractor whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub enum Backbone {
    Tiny(TinyBackbone),
    ResNet(ResNet),
}

impl Backbone {
    /// Builds the backbone and registers its parameters. The tiny network is
    /// initialized from `rng`; residual networks load `config.weights`.
    pub fn build<T: Scalar, R: Rng>(config: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        match config.kind {
            BackboneKind::Tiny => Ok(Backbone::Tiny(TinyBackbone::new(store, rng))),
            kind => {
                let path = config.weights.as_ref().expect("validated");
                let weights: WeightMap = crate::checkpoint::read_tensor_file(path)?.into_iter().collect();
                Self::from_weights(kind, &weights, store)
            }
        }
    }

    /// Residual network from an in-memory weight map.
    pub fn from_weights<T: Scalar>(kind: BackboneKind, weights: &WeightMap, store: &mut ParamStore<T>) -> Result<Self> {
        ensure!(kind != BackboneKind::Tiny, Config, "tiny backbone has no weight map");
        Ok(Backbone::ResNet(ResNet::load(kind, weights, store)?))
    }

    pub fn mid_channels(&self) -> usize {
        match self {
            Backbone::Tiny(_) => TinyBackbone::WIDTHS[1] + TinyBackbone::WIDTHS[2],
            Backbone::ResNet(_) => 512 + 1024,
        }
    }

    pub fn high_channels(&self) -> usize {
        match self {
            Backbone::Tiny(_) => TinyBackbone::WIDTHS[2],
            Backbone::ResNet(_) => 2048,
        }
    }

    /// `(mid, high)` feature nodes for a `[n, 3, side, side]` batch.
    pub fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, p: &Bound, images: Var) -> (Var, Var) {
        match self {
            Backbone::Tiny(b) => b.forward(g, p, images),
            Backbone::ResNet(b) => b.forward(g, p, images),
        }
    }

    /// Evaluation-mode extraction on normalized `[n, 3, h, w]` images.
    pub fn extract_features<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<FeatureSet<T>> {
        ensure!(
            images.shape().len() == 4 && images.shape()[1] == 3,
            Contract,
            "images must be [n, 3, h, w], got {:?}",
            images.shape()
        );
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let x = g.constant(images.clone());
        let (mid, high) = self.forward(&mut g, &p, x);
        Ok(FeatureSet {
            mid: g.value(mid).clone(),
            high: g.value(high).clone(),
            stride: STRIDE,
        })
    }
}
