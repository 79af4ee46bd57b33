//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as borrowed leaves, so building a graph never copies weights. Calling
//! [`Graph::backward`] on a scalar node returns the gradient of every node
//! that depends on a differentiable leaf.

use std::borrow::Cow;

use crate::correlation::{min_max_normalize, raw_correlation};
use crate::kernels::{self, ConvGeom};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, means: Vec<T>, rstds: Vec<T> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Relu(Var),
    Sigmoid(Var),
    MaxPool { x: Var, arg: Vec<usize> },
    Concat(Vec<Var>),
    Reshape(Var),
    Resize(Var),
    Expand(Var),
    MaskedGap { x: Var, weights: Vec<T> },
    CorrRaw { query: Var, support: Var, shots: usize, arg: Vec<usize> },
    MinMaxNorm { x: Var, lo: Vec<usize>, hi: Vec<usize> },
    ShotMean { x: Var, shots: usize },
    Add(Var, Var),
    Scale(Var, T),
    SoftmaxFg(Var),
    WeightedSum { weights: Var, planes: Var },
    Clamp { x: Var, lo: T, hi: T },
    Bce { score: Var, target: Vec<T>, positive_only: bool },
    GridNll { cells: Var, target: Vec<T> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation of one forward pass.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf; differentiable when `trainable`.
    pub fn leaf(&mut self, t: &'a Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, requires_grad: trainable });
        Var(self.nodes.len() - 1)
    }

    /// Owned differentiable leaf.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(y, Op::Conv { x, w, b, geom }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (y, means, rstds) = kernels::group_norm(self.value(x), self.value(gamma), self.value(beta), groups);
        self.push(y, Op::GroupNorm { x, gamma, beta, groups, means, rstds }, &[x, gamma, beta])
    }

    /// `y[n, c] = x[n, c] * scale[c] + shift[c]` over spatial positions.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value(x);
        let (_, c, h, w) = xv.dims4();
        let (sc, sh) = (self.value(scale), self.value(shift));
        let hw = h * w;
        let mut y = xv.clone();
        for (i, chunk) in y.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = *v * sc[ch] + sh[ch]);
        }
        self.push(y, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn max_pool(&mut self, x: Var, geom: ConvGeom) -> Var {
        let (y, arg) = kernels::max_pool(self.value(x), geom);
        self.push(y, Op::MaxPool { x, arg }, &[x])
    }

    /// Concatenation along the channel axis of 4-D tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let channels: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let (vn, vc, vh, vw) = self.value(v).dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat shape mismatch");
                vc
            })
            .collect();
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut y = Tensor::zeros(&[n, total, h, w]);
        for b in 0..n {
            let mut off = 0;
            for (&v, &c) in xs.iter().zip(&channels) {
                let src = &self.value(v).data()[b * c * hw..(b + 1) * c * hw];
                y.data_mut()[(b * total + off) * hw..(b * total + off + c) * hw].copy_from_slice(src);
                off += c;
            }
        }
        self.push(y, Op::Concat(xs.to_vec()), xs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshape(shape).expect("reshape element count");
        self.push(y, Op::Reshape(x), &[x])
    }

    /// Bilinear (corner-aligned) resize of a 4-D tensor.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let y = kernels::resize_bilinear(self.value(x), h, w);
        self.push(y, Op::Resize(x), &[x])
    }

    /// Broadcast `[n, c]` vectors over an `h x w` grid.
    pub fn expand(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let y = Tensor::from_fn(&[n, c, h, w], |i| xv[i / (h * w)]);
        self.push(y, Op::Expand(x), &[x])
    }

    /// `y[n, c] = sum_p x[n, c, p] * weights[n, p]` with constant weights.
    pub fn masked_gap(&mut self, x: Var, weights: Vec<T>) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        assert_eq!(weights.len(), n * hw, "masked_gap weight count");
        let xv = self.value(x);
        let y = Tensor::from_fn(&[n, c], |i| {
            let b = i / c;
            xv.data()[i * hw..(i + 1) * hw]
                .iter()
                .zip(&weights[b * hw..(b + 1) * hw])
                .map(|(&a, &wt)| a * wt)
                .sum()
        });
        self.push(y, Op::MaskedGap { x, weights }, &[x])
    }

    /// Raw max-cosine correlation. `query: [n, c, h, w]`,
    /// `support: [n * shots, c, h, w]`, one foreground cell list per support.
    pub fn corr_raw(&mut self, query: Var, support: Var, shots: usize, cells: &[Vec<u8>]) -> Var {
        let (n, c, h, w) = self.value(query).dims4();
        let hw = h * w;
        assert_eq!(self.value(support).dims4(), (n * shots, c, h, w), "support shape");
        assert_eq!(cells.len(), n * shots);
        let mut y = Tensor::zeros(&[n * shots, 1, h, w]);
        let mut arg = Vec::with_capacity(n * shots * hw);
        for j in 0..n * shots {
            let q = &self.value(query).data()[(j / shots) * c * hw..(j / shots + 1) * c * hw];
            let s = &self.value(support).data()[j * c * hw..(j + 1) * c * hw];
            let (raw, a) = raw_correlation(q, s, c, hw, &cells[j]);
            y.data_mut()[j * hw..(j + 1) * hw].copy_from_slice(&raw);
            arg.extend(a);
        }
        self.push(y, Op::CorrRaw { query, support, shots, arg }, &[query, support])
    }

    /// Per-sample min-max normalization of a `[n, 1, h, w]` map.
    pub fn min_max_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, _, h, w) = xv.dims4();
        let hw = h * w;
        let mut y = Tensor::zeros(xv.shape());
        let (mut lo, mut hi) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for b in 0..n {
            let (out, l, m) = min_max_normalize(&xv.data()[b * hw..(b + 1) * hw]);
            y.data_mut()[b * hw..(b + 1) * hw].copy_from_slice(&out);
            lo.push(l);
            hi.push(m);
        }
        self.push(y, Op::MinMaxNorm { x, lo, hi }, &[x])
    }

    /// Mean over consecutive groups of `shots` along the leading axis.
    pub fn shot_mean(&mut self, x: Var, shots: usize) -> Var {
        let xv = self.value(x);
        let lead = xv.shape()[0];
        assert_eq!(lead % shots, 0);
        let inner = xv.len() / lead;
        let mut shape = xv.shape().to_vec();
        shape[0] = lead / shots;
        // running mean: identical shots reproduce their common value exactly
        let y = Tensor::from_fn(&shape, |i| {
            let (b, r) = (i / inner, i % inner);
            let mut m = xv[b * shots * inner + r];
            for s in 1..shots {
                m += (xv[(b * shots + s) * inner + r] - m) / T::from_usize(s + 1).unwrap();
            }
            m
        });
        self.push(y, Op::ShotMean { x, shots }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).map(|v| v * s);
        self.push(y, Op::Scale(a, s), &[a])
    }

    /// Foreground probability `softmax(l)[1]` of `[n, 2, s, s]` logits, as `[n, s*s]`.
    pub fn softmax_fg(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, two, s1, s2) = xv.dims4();
        assert_eq!(two, 2, "cell logits need two channels");
        let k = s1 * s2;
        let y = Tensor::from_fn(&[n, k], |i| {
            let (b, c) = (i / k, i % k);
            sigmoid(xv[(b * 2 + 1) * k + c] - xv[b * 2 * k + c])
        });
        self.push(y, Op::SoftmaxFg(x), &[x])
    }

    /// `y[n, x] = sum_k weights[n, k] * planes[n, k, x]` as a matrix product.
    pub fn weighted_sum(&mut self, weights: Var, planes: Var) -> Var {
        let (n, k, h, w) = self.value(planes).dims4();
        assert_eq!(self.value(weights).shape(), &[n, k], "weights must be [n, k]");
        let hw = h * w;
        let mut y = Tensor::zeros(&[n, 1, h, w]);
        for b in 0..n {
            let wv = &self.value(weights).data()[b * k..(b + 1) * k];
            let pv = &self.value(planes).data()[b * k * hw..(b + 1) * k * hw];
            gemm(T::one(), Mat::new(wv, 1, k), Mat::new(pv, k, hw), T::zero(), &mut y.data_mut()[b * hw..(b + 1) * hw]);
        }
        self.push(y, Op::WeightedSum { weights, planes }, &[weights, planes])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let y = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(y, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Mean binary cross-entropy of probabilities against `target`.
    ///
    /// `positive_only` keeps only the `-y log p` term.
    pub fn bce(&mut self, score: Var, target: Vec<T>, positive_only: bool) -> Var {
        let sv = self.value(score);
        assert_eq!(sv.len(), target.len(), "bce target size");
        let n = T::from_usize(sv.len()).unwrap();
        let total: T = sv
            .data()
            .iter()
            .zip(&target)
            .map(|(&p, &y)| {
                let pos = -y * p.ln();
                if positive_only {
                    pos
                } else {
                    pos - (T::one() - y) * (T::one() - p).ln()
                }
            })
            .sum();
        self.push(Tensor::scalar(total / n), Op::Bce { score, target, positive_only }, &[score])
    }

    /// `-(1/(n s^2)) sum_i G_i log softmax(g_i)[fg]` over `[n, 2, s, s]` logits.
    pub fn grid_nll(&mut self, cells: Var, target: Vec<T>) -> Var {
        let cv = self.value(cells);
        let (n, _, s1, s2) = cv.dims4();
        let k = s1 * s2;
        assert_eq!(target.len(), n * k, "grid target size");
        let mut total = T::zero();
        for b in 0..n {
            for c in 0..k {
                let d = cv[b * 2 * k + c] - cv[(b * 2 + 1) * k + c];
                total += target[b * k + c] * softplus(d);
            }
        }
        let denom = T::from_usize(n * k).unwrap();
        self.push(Tensor::scalar(total / denom), Op::GridNll { cells, target }, &[cells])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *geom,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GroupNorm { x, gamma, groups, means, rstds, beta } => {
                let (dx, dg, db) =
                    kernels::group_norm_backward(self.value(*x), self.value(*gamma), gy, *groups, means, rstds);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = self.value(*x);
                let (_, c, h, w) = xv.dims4();
                let hw = h * w;
                let sc = self.value(*scale);
                let mut dx = gy.clone();
                let mut dsc = Tensor::zeros(&[c]);
                let mut dsh = Tensor::zeros(&[c]);
                for (p, (gchunk, xchunk)) in dx.data_mut().chunks_mut(hw).zip(xv.data().chunks(hw)).enumerate() {
                    let ch = p % c;
                    for (g, &xv) in gchunk.iter_mut().zip(xchunk) {
                        dsc[ch] += *g * xv;
                        dsh[ch] += *g;
                        *g *= sc[ch];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *scale, dsc);
                self.accumulate(grads, *shift, dsh);
            }
            Op::Relu(x) => {
                let mut dx = gy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = gy.clone();
                for (g, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *g *= s * (T::one() - s);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, arg } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (&g, &a) in gy.data().iter().zip(arg) {
                    dx[a] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let (n, total, h, w) = y.dims4();
                let hw = h * w;
                let mut off = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if self.requires_grad(v) {
                        let mut d = Tensor::zeros(&[n, c, h, w]);
                        for b in 0..n {
                            d.data_mut()[b * c * hw..(b + 1) * c * hw]
                                .copy_from_slice(&gy.data()[(b * total + off) * hw..(b * total + off + c) * hw]);
                        }
                        self.accumulate(grads, v, d);
                    }
                    off += c;
                }
            }
            Op::Reshape(x) => {
                let d = gy.clone().reshape(self.value(*x).shape()).expect("same element count");
                self.accumulate(grads, *x, d);
            }
            Op::Resize(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                self.accumulate(grads, *x, kernels::resize_bilinear_backward(gy, h, w));
            }
            Op::Expand(x) => {
                let (n, c, h, w) = y.dims4();
                let hw = h * w;
                let d = Tensor::from_fn(&[n, c], |i| gy.data()[i * hw..(i + 1) * hw].iter().copied().sum());
                self.accumulate(grads, *x, d);
            }
            Op::MaskedGap { x, weights } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let d = Tensor::from_fn(&[n, c, h, w], |i| {
                    let (nc, p) = (i / hw, i % hw);
                    gy[nc] * weights[(nc / c) * hw + p]
                });
                self.accumulate(grads, *x, d);
            }
            Op::CorrRaw { query, support, shots, arg } => {
                let qv = self.value(*query);
                let sv = self.value(*support);
                let (n, c, h, w) = qv.dims4();
                let hw = h * w;
                let mut dq = Tensor::zeros(qv.shape());
                let mut ds = Tensor::zeros(sv.shape());
                for j in 0..n * shots {
                    let qb = (j / shots) * c * hw;
                    let sb = j * c * hw;
                    for q in 0..hw {
                        let g = gy[j * hw + q];
                        if g == T::zero() {
                            continue;
                        }
                        let s = arg[j * hw + q];
                        let (mut na, mut nb) = (T::zero(), T::zero());
                        for ch in 0..c {
                            na += qv[qb + ch * hw + q].powi(2);
                            nb += sv[sb + ch * hw + s].powi(2);
                        }
                        let (na, nb) = (na.sqrt(), nb.sqrt());
                        if na == T::zero() || nb == T::zero() {
                            continue;
                        }
                        let cos = y[j * hw + q];
                        let inv = T::one() / (na * nb);
                        for ch in 0..c {
                            let a = qv[qb + ch * hw + q];
                            let bb = sv[sb + ch * hw + s];
                            dq[qb + ch * hw + q] += g * (bb * inv - cos * a / (na * na));
                            ds[sb + ch * hw + s] += g * (a * inv - cos * bb / (nb * nb));
                        }
                    }
                }
                self.accumulate(grads, *query, dq);
                self.accumulate(grads, *support, ds);
            }
            Op::MinMaxNorm { x, lo, hi } => {
                let xv = self.value(*x);
                let (n, _, h, w) = xv.dims4();
                let hw = h * w;
                let eps = T::lit(crate::correlation::EPSILON);
                let mut dx = Tensor::zeros(xv.shape());
                for b in 0..n {
                    let seg = &xv.data()[b * hw..(b + 1) * hw];
                    let (mn, mx) = (seg[lo[b]], seg[hi[b]]);
                    let denom = mx - mn + eps;
                    let (mut dmn, mut dmx) = (T::zero(), T::zero());
                    for p in 0..hw {
                        let g = gy[b * hw + p];
                        let r = (seg[p] - mn) / (denom * denom);
                        dx[b * hw + p] += g / denom;
                        dmn += g * (r - T::one() / denom);
                        dmx -= g * r;
                    }
                    dx[b * hw + lo[b]] += dmn;
                    dx[b * hw + hi[b]] += dmx;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ShotMean { x, shots } => {
                let xv = self.value(*x);
                let inner = xv.len() / xv.shape()[0];
                let k = T::from_usize(*shots).unwrap();
                let d = Tensor::from_fn(xv.shape(), |i| {
                    let (j, r) = (i / inner, i % inner);
                    gy[(j / shots) * inner + r] / k
                });
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gy.map(|g| g * s));
            }
            Op::SoftmaxFg(x) => {
                let (n, _, s1, s2) = self.value(*x).dims4();
                let k = s1 * s2;
                let mut d = Tensor::zeros(&[n, 2, s1, s2]);
                for b in 0..n {
                    for c in 0..k {
                        let p = y[b * k + c];
                        let g = gy[b * k + c] * p * (T::one() - p);
                        d[(b * 2 + 1) * k + c] = g;
                        d[b * 2 * k + c] = -g;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::WeightedSum { weights, planes } => {
                let (n, k, h, w) = self.value(*planes).dims4();
                let hw = h * w;
                let wv = self.value(*weights);
                let pv = self.value(*planes);
                if self.requires_grad(*weights) {
                    let mut dw = Tensor::zeros(&[n, k]);
                    for b in 0..n {
                        gemm(
                            T::one(),
                            Mat::new(&pv.data()[b * k * hw..(b + 1) * k * hw], k, hw),
                            Mat::new(&gy.data()[b * hw..(b + 1) * hw], hw, 1),
                            T::zero(),
                            &mut dw.data_mut()[b * k..(b + 1) * k],
                        );
                    }
                    self.accumulate(grads, *weights, dw);
                }
                if self.requires_grad(*planes) {
                    let mut dp = Tensor::zeros(&[n, k, h, w]);
                    for b in 0..n {
                        gemm(
                            T::one(),
                            Mat::new(&wv.data()[b * k..(b + 1) * k], k, 1),
                            Mat::new(&gy.data()[b * hw..(b + 1) * hw], 1, hw),
                            T::zero(),
                            &mut dp.data_mut()[b * k * hw..(b + 1) * k * hw],
                        );
                    }
                    self.accumulate(grads, *planes, dp);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let mut dx = gy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v < *lo || v > *hi {
                        *g = T::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Bce { score, target, positive_only } => {
                let sv = self.value(*score);
                let scale = gy[0] / T::from_usize(sv.len()).unwrap();
                let d = Tensor::from_fn(sv.shape(), |i| {
                    let (p, t) = (sv[i], target[i]);
                    let pos = -t / p;
                    let g = if *positive_only { pos } else { pos + (T::one() - t) / (T::one() - p) };
                    g * scale
                });
                self.accumulate(grads, *score, d);
            }
            Op::GridNll { cells, target } => {
                let cv = self.value(*cells);
                let (n, _, s1, s2) = cv.dims4();
                let k = s1 * s2;
                let scale = gy[0] / T::from_usize(n * k).unwrap();
                let mut d = Tensor::zeros(cv.shape());
                for b in 0..n {
                    for c in 0..k {
                        let diff = cv[b * 2 * k + c] - cv[(b * 2 + 1) * k + c];
                        // d softplus(l0 - l1) = sigmoid(l0 - l1) * (dl0 - dl1)
                        let g = target[b * k + c] * sigmoid(diff) * scale;
                        d[b * 2 * k + c] = g;
                        d[(b * 2 + 1) * k + c] = -g;
                    }
                }
                self.accumulate(grads, *cells, d);
            }
        }
    }
}
