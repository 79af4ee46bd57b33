//! Convolution layers built on the parameter store.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::params::{he_normal, Bound, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Group count of every normalization layer.
pub const NORM_GROUPS: usize = 8;

/// Convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
    ) -> Self {
        let k = geom.kernel;
        let fan_in = in_channels * k * k;
        let weight = store.add(format!("{name}.weight"), he_normal(rng, &[out_channels, in_channels, k, k], fan_in), group);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), group);
        Conv { weight, bias, geom, in_channels, out_channels }
    }

    pub fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.geom)
    }
}

/// Convolution, group normalization and rectifier.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
    ) -> Self {
        let conv = Conv::new(store, rng, &format!("{name}.conv"), group, in_channels, out_channels, geom);
        let gamma = store.add(format!("{name}.norm.weight"), Tensor::full(&[out_channels], T::one()), group);
        let beta = store.add(format!("{name}.norm.bias"), Tensor::zeros(&[out_channels]), group);
        ConvBlock { conv, gamma, beta }
    }

    pub fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, p: &Bound, x: Var) -> Var {
        let y = self.conv.forward(g, p, x);
        let y = g.group_norm(y, p.var(self.gamma), p.var(self.beta), NORM_GROUPS.min(self.conv.out_channels));
        g.relu(y)
    }
}
