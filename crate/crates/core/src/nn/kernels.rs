//! Raw tensor kernels behind the differentiable nn ops.
//!
//! Convolution runs as im2col plus matmul, parallelized across the batch:
//! each sample's outputs are written by one task and cross-sample gradient
//! sums are reduced serially in sample order, so results are bit-identical
//! for any worker thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{matmul, matmul_abt, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub fn conv_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if x_shape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d input must be [N, C, H, W], got {x_shape:?}"
        )));
    }
    if w_shape.len() != 4 || w_shape[2] != w_shape[3] {
        return Err(Error::Shape(format!(
            "conv2d weight must be [C_out, C_in, k, k], got {w_shape:?}"
        )));
    }
    let k = w_shape[2];
    if k % 2 == 0 {
        return Err(Error::Parameter(format!("kernel size {k} must be odd")));
    }
    if stride == 0 {
        return Err(Error::Parameter("stride must be positive".into()));
    }
    if w_shape[1] != x_shape[1] {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {}, weight expects {}",
            x_shape[1], w_shape[1]
        )));
    }
    let (h, w) = (x_shape[2], x_shape[3]);
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Shape(format!(
            "spatial dims {h}x{w} too small for kernel {k} with padding {padding}"
        )));
    }
    Ok(ConvDims {
        n: x_shape[0],
        c_in: x_shape[1],
        h,
        w,
        c_out: w_shape[0],
        k,
        stride,
        padding,
        h_out: (h + 2 * padding - k) / stride + 1,
        w_out: (w + 2 * padding - k) / stride + 1,
    })
}

/// Unfold one sample into `[C_in*k*k, H_out*W_out]` columns.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let spatial = d.h_out * d.w_out;
    debug_assert_eq!(col.len(), d.c_in * d.k * d.k * spatial);
    debug_assert_eq!(x.len(), d.c_in * d.h * d.w);
    for c in 0..d.c_in {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row_idx = (c * d.k + ki) * d.k + kj;
                let row = &mut col[row_idx * spatial..(row_idx + 1) * spatial];
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                    let dst = &mut row[oh * d.w_out..(oh + 1) * d.w_out];
                    if ih < 0 || ih >= d.h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for (ow, v) in dst.iter_mut().enumerate() {
                        let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                        *v = if iw < 0 || iw >= d.w as isize {
                            T::ZERO
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns back, accumulating where patches overlap.
fn col2im_add<T: Scalar>(col: &[T], d: &ConvDims, x: &mut [T]) {
    let spatial = d.h_out * d.w_out;
    for c in 0..d.c_in {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row_idx = (c * d.k + ki) * d.k + kj;
                let row = &col[row_idx * spatial..(row_idx + 1) * spatial];
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let src = &row[oh * d.w_out..(oh + 1) * d.w_out];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                        if iw >= 0 && iw < d.w as isize {
                            dst_row[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_work(d: &ConvDims) -> usize {
    d.n * d.c_out * d.c_in * d.k * d.k * d.h_out * d.w_out
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), weight.shape(), stride, padding)?;
    if bias.shape() != [d.c_out] {
        return Err(Error::Shape(format!(
            "conv2d bias shape {:?} does not match {} output channels",
            bias.shape(),
            d.c_out
        )));
    }
    let spatial = d.h_out * d.w_out;
    let ckk = d.c_in * d.k * d.k;
    let sample_in = d.c_in * d.h * d.w;
    let sample_out = d.c_out * spatial;
    let mut out = vec![T::ZERO; d.n * sample_out];

    let run_sample = |ni: usize, os: &mut [T], col: &mut Vec<T>| {
        let xs = &x.data()[ni * sample_in..(ni + 1) * sample_in];
        im2col(xs, &d, col);
        matmul(weight.data(), col, d.c_out, ckk, spatial, os);
        for (oc, &b) in bias.data().iter().enumerate() {
            for v in &mut os[oc * spatial..(oc + 1) * spatial] {
                *v += b;
            }
        }
    };

    if par::serial() || d.n == 1 || conv_work(&d) < 500_000 {
        let mut col = vec![T::ZERO; ckk * spatial];
        for (ni, os) in out.chunks_exact_mut(sample_out).enumerate() {
            run_sample(ni, os, &mut col);
        }
    } else {
        out.par_chunks_exact_mut(sample_out)
            .enumerate()
            .for_each(|(ni, os)| {
                let mut col = vec![T::ZERO; ckk * spatial];
                run_sample(ni, os, &mut col);
            });
    }
    Tensor::from_vec(&[d.n, d.c_out, d.h_out, d.w_out], out)
}

/// Gradients of conv2d. Returns `(grad_x, grad_weight, grad_bias)`; the
/// first two are skipped when not needed.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>)> {
    let d = conv_dims(x.shape(), weight.shape(), stride, padding)?;
    let spatial = d.h_out * d.w_out;
    let ckk = d.c_in * d.k * d.k;
    let sample_in = d.c_in * d.h * d.w;
    let sample_out = d.c_out * spatial;
    let g = grad_out.data();

    let mut grad_bias = vec![T::ZERO; d.c_out];
    for ni in 0..d.n {
        for (oc, gb) in grad_bias.iter_mut().enumerate() {
            let start = (ni * d.c_out + oc) * spatial;
            for &gv in &g[start..start + spatial] {
                *gb += gv;
            }
        }
    }

    let parallel = !par::serial() && d.n > 1 && conv_work(&d) >= 500_000;

    let grad_x = if need_x {
        // gcol = w^T g, then fold back; w^T built once and shared
        let mut wt = vec![T::ZERO; ckk * d.c_out];
        for oc in 0..d.c_out {
            for ck in 0..ckk {
                wt[ck * d.c_out + oc] = weight.data()[oc * ckk + ck];
            }
        }
        let mut gx = vec![T::ZERO; d.n * sample_in];
        let run = |ni: usize, gxs: &mut [T], gcol: &mut Vec<T>| {
            let gs = &g[ni * sample_out..(ni + 1) * sample_out];
            matmul(&wt, gs, ckk, d.c_out, spatial, gcol);
            col2im_add(gcol, &d, gxs);
        };
        if parallel {
            gx.par_chunks_exact_mut(sample_in)
                .enumerate()
                .for_each(|(ni, gxs)| {
                    let mut gcol = vec![T::ZERO; ckk * spatial];
                    run(ni, gxs, &mut gcol);
                });
        } else {
            let mut gcol = vec![T::ZERO; ckk * spatial];
            for (ni, gxs) in gx.chunks_exact_mut(sample_in).enumerate() {
                run(ni, gxs, &mut gcol);
            }
        }
        Some(Tensor::from_vec(x.shape(), gx)?)
    } else {
        None
    };

    let grad_w = if need_w {
        let per_sample = |ni: usize| -> Vec<T> {
            let mut col = vec![T::ZERO; ckk * spatial];
            let xs = &x.data()[ni * sample_in..(ni + 1) * sample_in];
            im2col(xs, &d, &mut col);
            let gs = &g[ni * sample_out..(ni + 1) * sample_out];
            let mut gw = vec![T::ZERO; d.c_out * ckk];
            // gw[oc, ck] = sum_s g[oc, s] * col[ck, s]
            matmul_abt(gs, &col, d.c_out, spatial, ckk, &mut gw);
            gw
        };
        let partials: Vec<Vec<T>> = if parallel {
            (0..d.n).into_par_iter().map(per_sample).collect()
        } else {
            (0..d.n).map(per_sample).collect()
        };
        // reduce in fixed sample order
        let mut gw = vec![T::ZERO; d.c_out * ckk];
        for part in &partials {
            for (acc, &v) in gw.iter_mut().zip(part) {
                *acc += v;
            }
        }
        Some(Tensor::from_vec(weight.shape(), gw)?)
    } else {
        None
    };

    Ok((
        grad_x,
        grad_w,
        Tensor::from_vec(&[d.c_out], grad_bias).expect("valid shape"),
    ))
}

/// Per-plane statistics saved by the instance-norm forward pass.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub inv_std: Vec<T>,
}

pub fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "instance_norm expects [N, C, H, W], got {s:?}"
        )));
    }
    let plane = s[2] * s[3];
    if plane < 2 {
        return Err(Error::Shape("instance_norm needs H*W >= 2".into()));
    }
    let planes = s[0] * s[1];
    let m = T::from_f64(plane as f64);
    let epsv = T::from_f64(eps);
    let mut out = vec![T::ZERO; x.numel()];
    let mut inv_std = Vec::with_capacity(planes);
    for p in 0..planes {
        let xs = &x.data()[p * plane..(p + 1) * plane];
        let mut mean = T::ZERO;
        for &v in xs {
            mean += v;
        }
        mean = mean / m;
        let mut var = T::ZERO;
        for &v in xs {
            let d = v - mean;
            var += d * d;
        }
        var = var / m;
        let istd = T::ONE / (var + epsv).sqrt();
        inv_std.push(istd);
        for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(xs) {
            *o = (v - mean) * istd;
        }
    }
    Ok((Tensor::from_vec(s, out)?, NormStats { inv_std }))
}

/// `dx = istd * (g - mean(g) - y * mean(g*y))` per plane, with `y` the
/// normalized output and the population variance convention.
pub fn instance_norm_backward<T: Scalar>(
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
    stats: &NormStats<T>,
) -> Tensor<T> {
    let s = y.shape();
    let plane = s[2] * s[3];
    let planes = s[0] * s[1];
    let m = T::from_f64(plane as f64);
    let mut gx = vec![T::ZERO; y.numel()];
    for p in 0..planes {
        let ys = &y.data()[p * plane..(p + 1) * plane];
        let gs = &grad_out.data()[p * plane..(p + 1) * plane];
        let mut g_mean = T::ZERO;
        let mut gy_mean = T::ZERO;
        for (&g, &yv) in gs.iter().zip(ys) {
            g_mean += g;
            gy_mean += g * yv;
        }
        g_mean = g_mean / m;
        gy_mean = gy_mean / m;
        let istd = stats.inv_std[p];
        for ((o, &g), &yv) in gx[p * plane..(p + 1) * plane]
            .iter_mut()
            .zip(gs)
            .zip(ys)
        {
            *o = istd * (g - g_mean - yv * gy_mean);
        }
    }
    Tensor::from_vec(s, gx).expect("valid shape")
}

pub fn softmax_channels_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "softmax_channels expects [N, C, H, W], got {s:?}"
        )));
    }
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    if c < 2 {
        return Err(Error::Shape("softmax_channels needs C >= 2".into()));
    }
    let mut out = vec![T::ZERO; x.numel()];
    let data = x.data();
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let mut mx = data[base + p];
            for ci in 1..c {
                mx = mx.maximum(data[base + ci * plane + p]);
            }
            let mut denom = T::ZERO;
            for ci in 0..c {
                let e = (data[base + ci * plane + p] - mx).exp();
                out[base + ci * plane + p] = e;
                denom += e;
            }
            for ci in 0..c {
                out[base + ci * plane + p] = out[base + ci * plane + p] / denom;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// `dx_c = y_c * (g_c - sum_k g_k y_k)` per pixel.
pub fn softmax_channels_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut gx = vec![T::ZERO; y.numel()];
    let (yd, gd) = (y.data(), grad_out.data());
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let mut dot = T::ZERO;
            for ci in 0..c {
                let idx = base + ci * plane + p;
                dot += gd[idx] * yd[idx];
            }
            for ci in 0..c {
                let idx = base + ci * plane + p;
                gx[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    Tensor::from_vec(s, gx).expect("valid shape")
}

pub fn upsample_nearest_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::Parameter("upsample factor must be >= 1".into()));
    }
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "upsample_nearest expects [N, C, H, W], got {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (h2, w2) = (h * factor, w * factor);
    let mut out = vec![T::ZERO; n * c * h2 * w2];
    let data = x.data();
    for pc in 0..n * c {
        let src = &data[pc * h * w..(pc + 1) * h * w];
        let dst = &mut out[pc * h2 * w2..(pc + 1) * h2 * w2];
        for i2 in 0..h2 {
            let i = i2 / factor;
            for j2 in 0..w2 {
                dst[i2 * w2 + j2] = src[i * w + j2 / factor];
            }
        }
    }
    Tensor::from_vec(&[n, c, h2, w2], out)
}

/// Each source pixel collects the sum of its replicated block's gradients.
pub fn upsample_nearest_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    factor: usize,
    in_shape: &[usize],
) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (h2, w2) = (h * factor, w * factor);
    let mut gx = vec![T::ZERO; n * c * h * w];
    let g = grad_out.data();
    for pc in 0..n * c {
        let dst = &mut gx[pc * h * w..(pc + 1) * h * w];
        let src = &g[pc * h2 * w2..(pc + 1) * h2 * w2];
        for i2 in 0..h2 {
            let i = i2 / factor;
            for j2 in 0..w2 {
                dst[i * w + j2 / factor] += src[i2 * w2 + j2];
            }
        }
    }
    Tensor::from_vec(in_shape, gx).expect("valid shape")
}

/// Nearest-neighbor resize to an arbitrary target; source index is
/// `floor(i * H / H2)`. Integer upscaling matches `upsample_nearest`.
pub fn resize_nearest_forward<T: Scalar>(
    x: &Tensor<T>,
    h2: usize,
    w2: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "resize_nearest expects [N, C, H, W], got {s:?}"
        )));
    }
    if h2 == 0 || w2 == 0 {
        return Err(Error::Parameter("resize target must be positive".into()));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![T::ZERO; n * c * h2 * w2];
    let data = x.data();
    for pc in 0..n * c {
        let src = &data[pc * h * w..(pc + 1) * h * w];
        let dst = &mut out[pc * h2 * w2..(pc + 1) * h2 * w2];
        for i2 in 0..h2 {
            let i = i2 * h / h2;
            for j2 in 0..w2 {
                dst[i2 * w2 + j2] = src[i * w + j2 * w / w2];
            }
        }
    }
    Tensor::from_vec(&[n, c, h2, w2], out)
}

pub fn resize_nearest_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_shape: &[usize],
) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let s = grad_out.shape();
    let (h2, w2) = (s[2], s[3]);
    let mut gx = vec![T::ZERO; n * c * h * w];
    let g = grad_out.data();
    for pc in 0..n * c {
        let dst = &mut gx[pc * h * w..(pc + 1) * h * w];
        let src = &g[pc * h2 * w2..(pc + 1) * h2 * w2];
        for i2 in 0..h2 {
            let i = i2 * h / h2;
            for j2 in 0..w2 {
                dst[i * w + j2 * w / w2] += src[i2 * w2 + j2];
            }
        }
    }
    Tensor::from_vec(in_shape, gx).expect("valid shape")
}

/// 2x2 average pooling; spatial dims must be even.
pub fn avg_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "avg_pool2 expects [N, C, H, W], got {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "avg_pool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::ZERO; n * c * h2 * w2];
    let data = x.data();
    for pc in 0..n * c {
        let src = &data[pc * h * w..(pc + 1) * h * w];
        let dst = &mut out[pc * h2 * w2..(pc + 1) * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                let a = src[(2 * i) * w + 2 * j];
                let b = src[(2 * i) * w + 2 * j + 1];
                let cc = src[(2 * i + 1) * w + 2 * j];
                let dd = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * w2 + j] = (a + b + cc + dd) * quarter;
            }
        }
    }
    Tensor::from_vec(&[n, c, h2, w2], out)
}

pub fn avg_pool2_backward<T: Scalar>(grad_out: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut gx = vec![T::ZERO; n * c * h * w];
    let g = grad_out.data();
    for pc in 0..n * c {
        let src = &g[pc * h2 * w2..(pc + 1) * h2 * w2];
        let dst = &mut gx[pc * h * w..(pc + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let gv = src[i * w2 + j] * quarter;
                dst[(2 * i) * w + 2 * j] = gv;
                dst[(2 * i) * w + 2 * j + 1] = gv;
                dst[(2 * i + 1) * w + 2 * j] = gv;
                dst[(2 * i + 1) * w + 2 * j + 1] = gv;
            }
        }
    }
    Tensor::from_vec(in_shape, gx).expect("valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn conv_identity_1x1() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::rand_normal(&[1, 2, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        // identity: w[o][i] = delta(o, i)
        let w = Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_ones_kernel_interior() {
        // 3x3 all-ones kernel over constant input c gives 9c at interior pixels
        let c = 0.7;
        let x = Tensor::<f64>::filled(&[1, 1, 5, 5], c).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert!((y.at(&[0, 0, 2, 2]) - 9.0 * c).abs() < 1e-12);
        // corner sees only 4 taps
        assert!((y.at(&[0, 0, 0, 0]) - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]).unwrap();
        let w = Tensor::<f64>::zeros(&[2, 2, 3, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[2]).unwrap();
        assert!(matches!(
            conv2d_forward(&x, &w, &b, 1, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_stride_two_dims() {
        let x = Tensor::<f64>::zeros(&[2, 3, 8, 16]).unwrap();
        let w = Tensor::<f64>::zeros(&[5, 3, 3, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[5]).unwrap();
        let y = conv2d_forward(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 8]);
    }

    #[test]
    fn instance_norm_constant_plane_is_zero() {
        let x = Tensor::<f64>::filled(&[1, 2, 3, 3], 5.0).unwrap();
        let (y, _) = instance_norm_forward(&x, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn instance_norm_two_values() {
        // plane [1, 3]: mean 2, population std 1 -> normalized [-1, 1]
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (y, _) = instance_norm_forward(&x, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn instance_norm_output_moments() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::rand_normal(&[2, 3, 4, 4], 2.0, 3.0, &mut rng).unwrap();
        let (y, _) = instance_norm_forward(&x, 1e-9).unwrap();
        let plane = 16;
        for p in 0..6 {
            let ys = &y.data()[p * plane..(p + 1) * plane];
            let mean: f64 = ys.iter().sum::<f64>() / plane as f64;
            let var: f64 = ys.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            assert!(mean.abs() < 1e-9, "plane {p} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "plane {p} var {var}");
        }
    }

    #[test]
    fn softmax_uniform_logits() {
        let x = Tensor::<f64>::zeros(&[1, 3, 1, 1]).unwrap();
        let y = softmax_channels_forward(&x).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_logits_stable() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![1000.0, 0.0]).unwrap();
        let y = softmax_channels_forward(&x).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_direct_value() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let y = softmax_channels_forward(&x).unwrap();
        let e = 1.0f64.exp();
        assert!((y.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((y.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest_forward(&x, 2).unwrap();
        #[rustfmt::skip]
        let expect = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::rand_normal(&[1, 2, 3, 4], 0.0, 1.0, &mut rng).unwrap();
        let y = upsample_nearest_forward(&x, 1).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn upsample_backward_counts_replicas() {
        let x_shape = [1, 1, 2, 2];
        let g = Tensor::<f64>::ones(&[1, 1, 4, 4]).unwrap();
        let gx = upsample_nearest_backward(&g, 2, &x_shape);
        assert!(gx.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn resize_matches_upsample_for_integer_factor() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::rand_normal(&[1, 2, 3, 5], 0.0, 1.0, &mut rng).unwrap();
        let a = upsample_nearest_forward(&x, 3).unwrap();
        let b = resize_nearest_forward(&x, 9, 15).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn resize_downscale_picks_topleft() {
        let x = Tensor::<f64>::ramp(&[1, 1, 4, 4]).unwrap();
        let y = resize_nearest_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn avg_pool_means() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let y = avg_pool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5]);
    }
}
