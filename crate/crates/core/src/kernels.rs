//! Forward and adjoint kernels for the layers the network uses.
//!
//! Everything here works on raw `[n, c, h, w]` tensors; the autodiff graph in
//! [`crate::autograd`] wires the adjoints together.

use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeom { kernel, stride, pad, dilation }
    }

    /// Square kernel, unit dilation, "same" padding.
    pub const fn same(kernel: usize, stride: usize) -> Self {
        ConvGeom { kernel, stride, pad: kernel / 2, dilation: 1 }
    }

    pub fn out_size(&self, input: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (input + 2 * self.pad - span) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, g: ConvGeom, col: &mut [T]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let p = ho * wo;
    let k = g.kernel;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, g: ConvGeom, img: &mut [T]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let p = ho * wo;
    let k = g.kernel;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, weight) + bias` with `x: [n, c, h, w]`, `weight: [o, c, k, k]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, g: ConvGeom) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let o = weight.shape()[0];
    assert_eq!(weight.shape(), &[o, c, g.kernel, g.kernel], "conv weight shape");
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let p = ho * wo;
    let ckk = c * g.kernel * g.kernel;
    let mut y = Tensor::zeros(&[n, o, ho, wo]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * p] };
    for b in 0..n {
        let img = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, c, h, w, g, &mut col);
            &col
        };
        let out = &mut y.data_mut()[b * o * p..(b + 1) * o * p];
        if let Some(bias) = bias {
            for (oc, chunk) in out.chunks_mut(p).enumerate() {
                chunk.fill(bias[oc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(T::one(), Mat::new(weight.data(), o, ckk), Mat::new(cols, ckk, p), beta, out);
    }
    y
}

/// Adjoint of [`conv2d`]: returns `(dx, dweight, dbias)`; `dx` only when asked.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let o = weight.shape()[0];
    let (_, _, ho, wo) = gy.dims4();
    let p = ho * wo;
    let ckk = c * g.kernel * g.kernel;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let mut db = Tensor::zeros(&[o]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * p] };
    let mut dcol = if need_dx && !g.is_pointwise() { vec![T::zero(); ckk * p] } else { Vec::new() };
    for b in 0..n {
        let gyb = &gy.data()[b * o * p..(b + 1) * o * p];
        for (oc, chunk) in gyb.chunks(p).enumerate() {
            db[oc] += chunk.iter().copied().sum::<T>();
        }
        let img = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, c, h, w, g, &mut col);
                &col
            };
            gemm(T::one(), Mat::new(gyb, o, p), Mat::t(cols, ckk, p), T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx.data_mut()[b * c * h * w..(b + 1) * c * h * w];
            if g.is_pointwise() {
                gemm(T::one(), Mat::t(weight.data(), o, ckk), Mat::new(gyb, o, p), T::zero(), dimg);
            } else {
                gemm(T::one(), Mat::t(weight.data(), o, ckk), Mat::new(gyb, o, p), T::zero(), &mut dcol);
                col2im(&dcol, c, h, w, g, dimg);
            }
        }
    }
    (dx, dw, db)
}

/// Per-output-index interpolation taps for one axis: `(i0, i1, w1)` with
/// value `(1 - w1) * v[i0] + w1 * v[i1]`.
fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = if output > 1 && input > 1 {
                o as f64 * (input - 1) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with corner alignment; identity when the size is unchanged.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut tmp = vec![T::zero(); h * ow];
    for (src, dst) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(oh * ow)) {
        for r in 0..h {
            let row = &src[r * w..(r + 1) * w];
            for (ox, &(i0, i1, f)) in tx.iter().enumerate() {
                let f = T::lit(f);
                tmp[r * ow + ox] = row[i0] * (T::one() - f) + row[i1] * f;
            }
        }
        for (oy, &(i0, i1, f)) in ty.iter().enumerate() {
            let f = T::lit(f);
            for ox in 0..ow {
                dst[oy * ow + ox] = tmp[i0 * ow + ox] * (T::one() - f) + tmp[i1 * ow + ox] * f;
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`] mapping an output gradient back to `(h, w)`.
pub fn resize_bilinear_backward<T: Scalar>(gy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = gy.dims4();
    if (h, w) == (oh, ow) {
        return gy.clone();
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    let mut tmp = vec![T::zero(); h * ow];
    for (src, dst) in gy.data().chunks(oh * ow).zip(gx.data_mut().chunks_mut(h * w)) {
        tmp.fill(T::zero());
        for (oy, &(i0, i1, f)) in ty.iter().enumerate() {
            let f = T::lit(f);
            for ox in 0..ow {
                let g = src[oy * ow + ox];
                tmp[i0 * ow + ox] += g * (T::one() - f);
                tmp[i1 * ow + ox] += g * f;
            }
        }
        for r in 0..h {
            for (ox, &(i0, i1, f)) in tx.iter().enumerate() {
                let f = T::lit(f);
                let g = tmp[r * ow + ox];
                dst[r * w + i0] += g * (T::one() - f);
                dst[r * w + i1] += g * f;
            }
        }
    }
    gx
}

/// Source index for nearest-neighbour resampling of one axis.
#[inline]
pub fn nearest_index(o: usize, input: usize, output: usize) -> usize {
    (((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization followed by a per-channel affine map.
///
/// Returns the output plus per-(sample, group) mean and reciprocal std.
pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
    let cpg = c / groups;
    let span = cpg * h * w;
    let count = T::from_usize(span).unwrap();
    let eps = T::lit(GROUP_NORM_EPS);
    let mut y = Tensor::zeros(x.shape());
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for b in 0..n {
        for gi in 0..groups {
            let start = (b * c + gi * cpg) * h * w;
            let seg = &x.data()[start..start + span];
            let mean = seg.iter().copied().sum::<T>() / count;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = T::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let out = &mut y.data_mut()[start..start + span];
            for (ci, (o_ch, x_ch)) in out.chunks_mut(h * w).zip(seg.chunks(h * w)).enumerate() {
                let ch = gi * cpg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                for (o, &v) in o_ch.iter_mut().zip(x_ch) {
                    *o = (v - mean) * rstd * ga + be;
                }
            }
        }
    }
    (y, means, rstds)
}

/// Adjoint of [`group_norm`]: `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
    groups: usize,
    means: &[T],
    rstds: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let cpg = c / groups;
    let hw = h * w;
    let span = cpg * hw;
    let count = T::from_usize(span).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for b in 0..n {
        for gi in 0..groups {
            let (mean, rstd) = (means[b * groups + gi], rstds[b * groups + gi]);
            let start = (b * c + gi * cpg) * hw;
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - mean) * rstd;
                    let g = gy[i];
                    dgamma[ch] += g * xhat;
                    dbeta[ch] += g;
                    let d = g * gamma[ch];
                    sum_d += d;
                    sum_dx += d * xhat;
                }
            }
            let mean_d = sum_d / count;
            let mean_dx = sum_dx / count;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - mean) * rstd;
                    let d = gy[i] * gamma[ch];
                    dx[i] = rstd * (d - mean_d - xhat * mean_dx);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Max pooling; returns the output and the flat input index of every maximum.
pub fn max_pool<T: Scalar>(x: &Tensor<T>, g: ConvGeom) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = base;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                y[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (y, arg)
}
