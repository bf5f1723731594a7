//! Differentiable neural building blocks: 2-D convolution, nearest
//! upsampling and resizing, instance normalization, activations, average
//! pooling, and the per-pixel channel softmax.

pub mod kernels;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Convolution parameters. Kernels are square with odd size; padding is
/// zero-padding and `stride` applies to both axes.
#[derive(Debug, Clone)]
pub struct Conv2dParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv weight must be [C_out, C_in, k, k] with odd k, got {ws:?}"
            )));
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "conv bias shape {:?} does not match {} output channels",
                bias.shape(),
                ws[0]
            )));
        }
        Ok(Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// He-style init: weights `N(0, sqrt(2 / fan_in))`, zero bias,
    /// "same" padding `(k-1)/2`.
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        Self::new(
            Tensor::rand_normal(&[c_out, c_in, k, k], 0.0, std, rng)?,
            Tensor::zeros(&[c_out])?,
            stride,
            (k - 1) / 2,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Place the parameters on a tape, trainable or frozen.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Conv2dVars<T> {
        let place = |t: &Tensor<T>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Conv2dVars {
            weight: place(&self.weight),
            bias: place(&self.bias),
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Forward application outside any tape (reference paths, inference).
    pub fn apply_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::conv2d_forward(x, &self.weight, &self.bias, self.stride, self.padding)
    }
}

/// Tape-bound convolution parameters.
pub struct Conv2dVars<T: Scalar> {
    pub weight: Var<T>,
    pub bias: Var<T>,
    pub stride: usize,
    pub padding: usize,
}

/// Places parameter tensors on a tape while recording `(name, var)` pairs,
/// so optimizers can match gradients back to parameters by position.
pub struct ParamBinder<'a, T: Scalar> {
    tape: &'a Tape<T>,
    trainable: bool,
    entries: Vec<(String, Var<T>)>,
}

impl<'a, T: Scalar> ParamBinder<'a, T> {
    pub fn new(tape: &'a Tape<T>, trainable: bool) -> Self {
        ParamBinder {
            tape,
            trainable,
            entries: Vec::new(),
        }
    }

    pub fn tensor(&mut self, name: String, t: &Tensor<T>) -> Var<T> {
        let var = if self.trainable {
            self.tape.leaf(t.clone())
        } else {
            self.tape.constant(t.clone())
        };
        self.entries.push((name, var.clone()));
        var
    }

    pub fn conv(&mut self, prefix: &str, p: &Conv2dParams<T>) -> Conv2dVars<T> {
        Conv2dVars {
            weight: self.tensor(format!("{prefix}.weight"), &p.weight),
            bias: self.tensor(format!("{prefix}.bias"), &p.bias),
            stride: p.stride,
            padding: p.padding,
        }
    }

    pub fn into_entries(self) -> Vec<(String, Var<T>)> {
        self.entries
    }
}

impl<T: Scalar> Conv2dVars<T> {
    pub fn apply(&self, x: &Var<T>) -> Result<Var<T>> {
        conv2d(x, &self.weight, &self.bias, self.stride, self.padding)
    }
}

/// Cross-correlation with zero padding, differentiable in `x`, `weight`
/// and `bias`.
pub fn conv2d<T: Scalar>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: &Var<T>,
    stride: usize,
    padding: usize,
) -> Result<Var<T>> {
    let value = x.with_value(|xv| {
        weight.with_value(|wv| {
            bias.with_value(|bv| kernels::conv2d_forward(xv, wv, bv, stride, padding))
        })
    })?;
    Ok(x.tape().record(&[x, weight, bias], value, move || {
        Box::new(move |args| {
            let (xv, wv) = (args.inputs[0], args.inputs[1]);
            let (gx, gw, gb) = kernels::conv2d_backward(
                xv,
                wv,
                args.grad_out,
                stride,
                padding,
                args.needs[0],
                args.needs[1],
            )
            .expect("shapes validated in forward");
            vec![gx, gw, Some(gb)]
        })
    }))
}

/// Replicate each pixel into a `factor x factor` block.
pub fn upsample_nearest<T: Scalar>(x: &Var<T>, factor: usize) -> Result<Var<T>> {
    let value = x.with_value(|xv| kernels::upsample_nearest_forward(xv, factor))?;
    let in_shape = x.shape();
    Ok(x.tape().record(&[x], value, move || {
        Box::new(move |args| {
            vec![Some(kernels::upsample_nearest_backward(
                args.grad_out,
                factor,
                &in_shape,
            ))]
        })
    }))
}

/// Nearest-neighbor resize to `(h, w)`; handles both up- and downscaling.
pub fn resize_nearest<T: Scalar>(x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let value = x.with_value(|xv| kernels::resize_nearest_forward(xv, h, w))?;
    let in_shape = x.shape();
    Ok(x.tape().record(&[x], value, move || {
        Box::new(move |args| {
            vec![Some(kernels::resize_nearest_backward(
                args.grad_out,
                &in_shape,
            ))]
        })
    }))
}

pub fn avg_pool2<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let value = x.with_value(kernels::avg_pool2_forward)?;
    let in_shape = x.shape();
    Ok(x.tape().record(&[x], value, move || {
        Box::new(move |args| vec![Some(kernels::avg_pool2_backward(args.grad_out, &in_shape))])
    }))
}

/// Per-sample, per-channel normalization to zero mean and unit variance.
pub fn instance_norm<T: Scalar>(x: &Var<T>, eps: f64) -> Result<Var<T>> {
    let (value, stats) = x.with_value(|xv| kernels::instance_norm_forward(xv, eps))?;
    Ok(x.tape().record(&[x], value, move || {
        Box::new(move |args| {
            vec![Some(kernels::instance_norm_backward(
                args.output,
                args.grad_out,
                &stats,
            ))]
        })
    }))
}

pub fn relu<T: Scalar>(x: &Var<T>) -> Var<T> {
    let value = x.with_value(|xv| xv.map(|v| v.maximum(T::ZERO)));
    x.tape().record(&[x], value, || {
        Box::new(|args| {
            let g = args
                .grad_out
                .zip_with(args.inputs[0], |g, v| if v > T::ZERO { g } else { T::ZERO })
                .expect("same shape");
            vec![Some(g)]
        })
    })
}

pub fn leaky_relu<T: Scalar>(x: &Var<T>, slope: f64) -> Var<T> {
    let s = T::from_f64(slope);
    let value = x.with_value(|xv| xv.map(|v| if v > T::ZERO { v } else { v * s }));
    x.tape().record(&[x], value, move || {
        Box::new(move |args| {
            let g = args
                .grad_out
                .zip_with(args.inputs[0], |g, v| if v > T::ZERO { g } else { g * s })
                .expect("same shape");
            vec![Some(g)]
        })
    })
}

pub fn tanh<T: Scalar>(x: &Var<T>) -> Var<T> {
    let value = x.with_value(|xv| xv.map(|v| v.tanh()));
    x.tape().record(&[x], value, || {
        Box::new(|args| {
            let g = args
                .grad_out
                .zip_with(args.output, |g, y| g * (T::ONE - y * y))
                .expect("same shape");
            vec![Some(g)]
        })
    })
}

pub fn sigmoid<T: Scalar>(x: &Var<T>) -> Var<T> {
    let value = x.with_value(|xv| xv.map(|v| T::ONE / (T::ONE + (-v).exp())));
    x.tape().record(&[x], value, || {
        Box::new(|args| {
            let g = args
                .grad_out
                .zip_with(args.output, |g, y| g * y * (T::ONE - y))
                .expect("same shape");
            vec![Some(g)]
        })
    })
}

/// Softmax across the channel axis of `[N, C, H, W]`, max-subtracted for
/// stability. Every pixel's channel vector sums to 1.
pub fn softmax_channels<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let value = x.with_value(kernels::softmax_channels_forward)?;
    Ok(x.tape().record(&[x], value, || {
        Box::new(|args| {
            vec![Some(kernels::softmax_channels_backward(
                args.output,
                args.grad_out,
            ))]
        })
    }))
}
