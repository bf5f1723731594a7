//! Dense layout estimation as a linear transformation over upsampled,
//! concatenated decoder features.
//!
//! Decoder feature maps are nearest-upsampled to the output resolution,
//! stacked along the channel axis into `X`, and mapped to class logits by a
//! learned `[classes, channels]` matrix (an affine map when the bias is
//! enabled; zero bias recovers the pure linear form). A channel softmax
//! turns the logits into a per-pixel distribution.

use std::path::Path;

use crate::autodiff::{ops, Tape, Var};
use crate::error::{Error, Result};
use crate::io::pnm::{write_pgm, GrayImage};
use crate::nn::{self, ParamBinder};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Scalar, Tensor};

/// Upsampled decoder features ready for the layout head.
pub struct FeatureBank<T: Scalar> {
    /// Per-layer maps after upsampling, in decoder order.
    pub upsampled: Vec<Var<T>>,
    /// All maps concatenated along channels, `[N, n, target_h, target_w]`.
    pub stacked: Var<T>,
    pub channels: usize,
    pub target_h: usize,
    pub target_w: usize,
}

/// Nearest-upsample every decoder map to the target resolution and stack
/// them along channels. Each map's dims must divide the target dims by one
/// integer factor.
pub fn gather_features<T: Scalar>(
    decoder_maps: &[&Var<T>],
    target_h: usize,
    target_w: usize,
) -> Result<FeatureBank<T>> {
    if decoder_maps.is_empty() {
        return Err(Error::Shape("gather_features needs at least one map".into()));
    }
    let mut upsampled = Vec::with_capacity(decoder_maps.len());
    let mut channels = 0;
    for map in decoder_maps {
        let s = map.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "decoder map must be [N, C, H, W], got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        if target_h % h != 0 || target_w % w != 0 || target_h / h != target_w / w {
            return Err(Error::Shape(format!(
                "map {h}x{w} does not divide target {target_h}x{target_w} by one integer factor"
            )));
        }
        let factor = target_h / h;
        channels += s[1];
        upsampled.push(if factor == 1 {
            (*map).clone()
        } else {
            nn::upsample_nearest(map, factor)?
        });
    }
    let refs: Vec<&Var<T>> = upsampled.iter().collect();
    let stacked = ops::concat_channels(&refs)?;
    Ok(FeatureBank {
        upsampled,
        stacked,
        channels,
        target_h,
        target_w,
    })
}

/// The learned linear map from stacked features to class logits.
#[derive(Debug, Clone)]
pub struct LayoutTransform<T: Scalar> {
    /// `[classes, channels]`.
    pub t: Tensor<T>,
    /// `[classes]`; ignored unless `use_bias`.
    pub bias: Tensor<T>,
    pub use_bias: bool,
}

impl<T: Scalar> LayoutTransform<T> {
    pub fn init(classes: usize, channels: usize, rng: &mut Rng) -> Result<Self> {
        let std = (1.0 / channels as f64).sqrt();
        Ok(LayoutTransform {
            t: Tensor::rand_normal(&[classes, channels], 0.0, std, rng)?,
            bias: Tensor::zeros(&[classes])?,
            use_bias: true,
        })
    }

    pub fn classes(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> LayoutTransformVars<T> {
        let mut binder = ParamBinder::new(tape, trainable);
        self.bind_collect(&mut binder, "layout")
    }

    pub fn bind_collect(
        &self,
        b: &mut ParamBinder<'_, T>,
        prefix: &str,
    ) -> LayoutTransformVars<T> {
        LayoutTransformVars {
            t: b.tensor(format!("{prefix}.t"), &self.t),
            bias: b.tensor(format!("{prefix}.bias"), &self.bias),
            use_bias: self.use_bias,
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{prefix}.t"), &self.t),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{prefix}.t"), &mut self.t),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }
}

pub struct LayoutTransformVars<T: Scalar> {
    pub t: Var<T>,
    pub bias: Var<T>,
    pub use_bias: bool,
}

/// Logits and the semantic-map probabilities they induce.
pub struct LayoutHeadOut<T: Scalar> {
    pub logits: Var<T>,
    pub probs: Var<T>,
}

/// `logits[c, ij] = sum_k T[c, k] X[k, ij] (+ bias[c])`, then a channel
/// softmax. Equivalent to a 1x1 convolution with weight `T`, but computed
/// through the direct matrix route.
pub fn layout_head<T: Scalar>(
    bank: &FeatureBank<T>,
    t: &LayoutTransformVars<T>,
) -> Result<LayoutHeadOut<T>> {
    let tw = t.t.shape();
    if tw[1] != bank.channels {
        return Err(Error::Shape(format!(
            "layout transform expects {} channels, bank has {}",
            tw[1], bank.channels
        )));
    }
    let bias = t.use_bias.then_some(&t.bias);
    let logits = ops::channel_linear(&bank.stacked, &t.t, bias)?;
    let probs = nn::softmax_channels(&logits)?;
    Ok(LayoutHeadOut { logits, probs })
}

/// Write predicted hard labels as a P5 image with class index scaled to
/// `{0, 127, 254}`.
pub fn export_layout_pgm(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let s = labels.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[0] == 1 => (s[1], s[2]),
        _ => {
            return Err(Error::Shape(format!(
                "expected a single [H, W] label map, got {s:?}"
            )))
        }
    };
    let pixels = labels.data().iter().map(|&l| l.saturating_mul(127)).collect();
    write_pgm(
        path,
        &GrayImage {
            width: w,
            height: h,
            pixels,
        },
    )
}
