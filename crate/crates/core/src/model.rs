//! The end-to-end generator: a slim coarse network that predicts the
//! background and the dense layout, the composite step, a refine network
//! whose decoder blocks are modulated by region-adaptive normalization, and
//! a conditional patch discriminator.

use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::{ops, Tape, Var};
use crate::error::{Error, Result};
use crate::io::archive::{read_archive, write_archive};
use crate::io::stnt::{tensor_from_bytes, tensor_to_bytes};
use crate::layout::{gather_features, layout_head, LayoutTransform, LayoutTransformVars};
use crate::losses::expand_mask_channels;
use crate::nn::{self, Conv2dParams, Conv2dVars, ParamBinder};
use crate::rng::Rng;
use crate::softsean::{
    ssean_block, SseanBlockParams, SseanBlockVars, StyleEncoderParams, StyleEncoderVars,
    DEFAULT_SHARPEN_K,
};
use crate::tensor::{Scalar, Tensor};

const LRELU_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// Model hyperparameters carried in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub style_dim: usize,
    pub k_sharpen: f64,
}

impl ModelMeta {
    pub fn desk(height: usize, width: usize) -> Self {
        ModelMeta {
            height,
            width,
            classes: 3,
            style_dim: 16,
            k_sharpen: DEFAULT_SHARPEN_K,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height < 16 || self.width < 16 {
            return Err(Error::Shape(format!(
                "resolution {}x{} must be >= 16 and divisible by the total stride 8",
                self.height, self.width
            )));
        }
        if self.k_sharpen <= 0.0 {
            return Err(Error::Parameter(format!(
                "k_sharpen must be positive, got {}",
                self.k_sharpen
            )));
        }
        if self.classes < 2 || self.style_dim == 0 {
            return Err(Error::Config("classes >= 2 and style_dim >= 1 required".into()));
        }
        Ok(())
    }
}

/// Zero out the foreground: `I_f = full * (1 - mask)`.
///
/// The mask must be binary; masked pixels come out exactly 0.
pub fn mask_input<T: Scalar>(full: &Tensor<T>, fg_mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (fs, ms) = (full.shape(), fg_mask.shape());
    if fs.len() != 4 || ms.len() != 4 || ms[1] != 1 || fs[0] != ms[0] || fs[2] != ms[2] || fs[3] != ms[3]
    {
        return Err(Error::Shape(format!(
            "mask_input: image {fs:?} vs mask {ms:?}"
        )));
    }
    if let Some(&bad) = fg_mask
        .data()
        .iter()
        .find(|&&v| v != T::ZERO && v != T::ONE)
    {
        return Err(Error::Mask(format!("mask value {bad} is not binary")));
    }
    let (n, c, plane) = (fs[0], fs[1], fs[2] * fs[3]);
    let mut out = full.data().to_vec();
    for ni in 0..n {
        let mrow = &fg_mask.data()[ni * plane..(ni + 1) * plane];
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            for (p, &m) in mrow.iter().enumerate() {
                if m == T::ONE {
                    out[base + p] = T::ZERO;
                }
            }
        }
    }
    Tensor::from_vec(fs, out)
}

/// `out = known * (1 - mask) + generated * mask` on plain tensors.
pub fn composite_tensors<T: Scalar>(
    known: &Tensor<T>,
    generated: &Tensor<T>,
    fg_mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    if known.shape() != generated.shape() {
        return Err(Error::Shape(format!(
            "composite: {:?} vs {:?}",
            known.shape(),
            generated.shape()
        )));
    }
    let channels = known.shape()[1];
    let mask_c = expand_mask_channels(fg_mask, channels)?;
    let keep = known.zip_with(&mask_c, |v, m| v * (T::ONE - m))?;
    let fill = generated.mul(&mask_c)?;
    keep.add(&fill)
}

/// Differentiable composite: gradients flow to `generated` inside the mask
/// only; known pixels pass through bit-exactly.
pub fn composite<T: Scalar>(
    known: &Tensor<T>,
    generated: &Var<T>,
    fg_mask: &Tensor<T>,
) -> Result<Var<T>> {
    let gs = generated.shape();
    if known.shape() != gs.as_slice() {
        return Err(Error::Shape(format!(
            "composite: {:?} vs {gs:?}",
            known.shape()
        )));
    }
    let channels = gs[1];
    let mask_c = expand_mask_channels(fg_mask, channels)?;
    let keep = known.zip_with(&mask_c, |v, m| v * (T::ONE - m))?;
    let tape = generated.tape();
    let fill = ops::mul(generated, &tape.constant(mask_c))?;
    ops::add(&tape.constant(keep), &fill)
}

/// Composite where both images are on the tape; gradients flow to `known`
/// outside the mask and to `generated` inside it.
pub fn composite_vars<T: Scalar>(
    known: &Var<T>,
    generated: &Var<T>,
    fg_mask: &Tensor<T>,
) -> Result<Var<T>> {
    let gs = generated.shape();
    if known.shape() != gs {
        return Err(Error::Shape(format!(
            "composite: {:?} vs {gs:?}",
            known.shape()
        )));
    }
    let channels = gs[1];
    let mask_c = expand_mask_channels(fg_mask, channels)?;
    let inv = mask_c.map(|m| T::ONE - m);
    let tape = generated.tape();
    let keep = ops::mul(known, &tape.constant(inv))?;
    let fill = ops::mul(generated, &tape.constant(mask_c))?;
    ops::add(&keep, &fill)
}

// ---------------------------------------------------------------------------
// Coarse network
// ---------------------------------------------------------------------------

/// Slim encoder/decoder working at half the input resolution, exposing its
/// decoder feature maps for the layout head.
#[derive(Debug, Clone)]
pub struct CoarseNet<T: Scalar> {
    pub enc1: Conv2dParams<T>,
    pub enc2: Conv2dParams<T>,
    pub enc3: Conv2dParams<T>,
    pub dec1: Conv2dParams<T>,
    pub dec2: Conv2dParams<T>,
    pub to_rgb: Conv2dParams<T>,
    pub layout: LayoutTransform<T>,
}

const COARSE_WIDTHS: [usize; 3] = [16, 32, 64];

impl<T: Scalar> CoarseNet<T> {
    pub fn init(meta: &ModelMeta, rng: &mut Rng) -> Result<Self> {
        let [w1, w2, w3] = COARSE_WIDTHS;
        // decoder exposes w2 + w1 channels to the layout head
        let layout = LayoutTransform::init(meta.classes, w2 + w1, rng)?;
        Ok(CoarseNet {
            enc1: Conv2dParams::init(3, w1, 3, 1, rng)?,
            enc2: Conv2dParams::init(w1, w2, 3, 2, rng)?,
            enc3: Conv2dParams::init(w2, w3, 3, 2, rng)?,
            dec1: Conv2dParams::init(w3, w2, 3, 1, rng)?,
            dec2: Conv2dParams::init(w2, w1, 3, 1, rng)?,
            to_rgb: Conv2dParams::init(w1, 3, 3, 1, rng)?,
            layout,
        })
    }

    pub fn bind_collect(&self, b: &mut ParamBinder<'_, T>, prefix: &str) -> CoarseNetVars<T> {
        CoarseNetVars {
            enc1: b.conv(&format!("{prefix}.enc1"), &self.enc1),
            enc2: b.conv(&format!("{prefix}.enc2"), &self.enc2),
            enc3: b.conv(&format!("{prefix}.enc3"), &self.enc3),
            dec1: b.conv(&format!("{prefix}.dec1"), &self.dec1),
            dec2: b.conv(&format!("{prefix}.dec2"), &self.dec2),
            to_rgb: b.conv(&format!("{prefix}.to_rgb"), &self.to_rgb),
            layout: self.layout.bind_collect(b, &format!("{prefix}.layout")),
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, conv) in self.conv_fields() {
            out.push((format!("{prefix}.{name}.weight"), &conv.weight));
            out.push((format!("{prefix}.{name}.bias"), &conv.bias));
        }
        out.extend(self.layout.named_tensors(&format!("{prefix}.layout")));
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let layout_prefix = format!("{prefix}.layout");
        let mut out = Vec::new();
        for (name, conv) in [
            ("enc1", &mut self.enc1),
            ("enc2", &mut self.enc2),
            ("enc3", &mut self.enc3),
            ("dec1", &mut self.dec1),
            ("dec2", &mut self.dec2),
            ("to_rgb", &mut self.to_rgb),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &mut conv.weight));
            out.push((format!("{prefix}.{name}.bias"), &mut conv.bias));
        }
        out.extend(self.layout.named_tensors_mut(&layout_prefix));
        out
    }

    fn conv_fields(&self) -> [(&'static str, &Conv2dParams<T>); 6] {
        [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("enc3", &self.enc3),
            ("dec1", &self.dec1),
            ("dec2", &self.dec2),
            ("to_rgb", &self.to_rgb),
        ]
    }
}

pub struct CoarseNetVars<T: Scalar> {
    pub enc1: Conv2dVars<T>,
    pub enc2: Conv2dVars<T>,
    pub enc3: Conv2dVars<T>,
    pub dec1: Conv2dVars<T>,
    pub dec2: Conv2dVars<T>,
    pub to_rgb: Conv2dVars<T>,
    pub layout: LayoutTransformVars<T>,
}

/// Coarse outputs at working resolution.
pub struct CoarseOut<T: Scalar> {
    pub i_c: Var<T>,
    pub layout_logits: Var<T>,
    pub m_probs: Var<T>,
}

/// `{I_c, M_s} = G_c(I_f)`: the input is halved, run through the slim
/// encoder/decoder, and both outputs are returned at working resolution.
pub fn coarse_forward<T: Scalar>(net: &CoarseNetVars<T>, i_f: &Var<T>) -> Result<CoarseOut<T>> {
    let s = i_f.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!("coarse input must be [N, 3, H, W], got {s:?}")));
    }
    if s[2] % 8 != 0 || s[3] % 8 != 0 {
        return Err(Error::Shape(format!(
            "resolution {}x{} not divisible by the network stride",
            s[2], s[3]
        )));
    }
    let lrelu = |x: &Var<T>| nn::leaky_relu(x, LRELU_SLOPE);
    let x = nn::avg_pool2(i_f)?;
    let e1 = lrelu(&net.enc1.apply(&x)?);
    let e2 = lrelu(&nn::instance_norm(&net.enc2.apply(&e1)?, NORM_EPS)?);
    let e3 = lrelu(&nn::instance_norm(&net.enc3.apply(&e2)?, NORM_EPS)?);
    let d1 = lrelu(&nn::instance_norm(
        &net.dec1.apply(&nn::upsample_nearest(&e3, 2)?)?,
        NORM_EPS,
    )?);
    let d2 = lrelu(&nn::instance_norm(
        &net.dec2.apply(&nn::upsample_nearest(&d1, 2)?)?,
        NORM_EPS,
    )?);
    let i_c_half = nn::tanh(&net.to_rgb.apply(&d2)?);
    let i_c = nn::upsample_nearest(&i_c_half, 2)?;

    let bank = gather_features(&[&d1, &d2], s[2], s[3])?;
    let head = layout_head(&bank, &net.layout)?;
    Ok(CoarseOut {
        i_c,
        layout_logits: head.logits,
        m_probs: head.probs,
    })
}

// ---------------------------------------------------------------------------
// Refine network
// ---------------------------------------------------------------------------

/// Context encoder over the composited image plus mask, and a decoder whose
/// blocks are each modulated by a region-adaptive normalization block.
#[derive(Debug, Clone)]
pub struct RefineNet<T: Scalar> {
    pub enc1: Conv2dParams<T>,
    pub enc2: Conv2dParams<T>,
    pub enc3: Conv2dParams<T>,
    pub dec1: Conv2dParams<T>,
    pub ssean1: SseanBlockParams<T>,
    pub dec2: Conv2dParams<T>,
    pub ssean2: SseanBlockParams<T>,
    pub to_rgb: Conv2dParams<T>,
}

const REFINE_WIDTHS: [usize; 3] = [32, 64, 128];

impl<T: Scalar> RefineNet<T> {
    pub fn init(meta: &ModelMeta, rng: &mut Rng) -> Result<Self> {
        let [w1, w2, w3] = REFINE_WIDTHS;
        let k = Some(meta.k_sharpen);
        Ok(RefineNet {
            enc1: Conv2dParams::init(4, w1, 3, 2, rng)?,
            enc2: Conv2dParams::init(w1, w2, 3, 2, rng)?,
            enc3: Conv2dParams::init(w2, w3, 3, 2, rng)?,
            dec1: Conv2dParams::init(w3, w2, 3, 1, rng)?,
            ssean1: SseanBlockParams::init(w2, meta.classes, meta.style_dim, k, rng)?,
            dec2: Conv2dParams::init(w2, w1, 3, 1, rng)?,
            ssean2: SseanBlockParams::init(w1, meta.classes, meta.style_dim, k, rng)?,
            to_rgb: Conv2dParams::init(w1, 3, 3, 1, rng)?,
        })
    }

    pub fn bind_collect(&self, b: &mut ParamBinder<'_, T>, prefix: &str) -> RefineNetVars<T> {
        RefineNetVars {
            enc1: b.conv(&format!("{prefix}.enc1"), &self.enc1),
            enc2: b.conv(&format!("{prefix}.enc2"), &self.enc2),
            enc3: b.conv(&format!("{prefix}.enc3"), &self.enc3),
            dec1: b.conv(&format!("{prefix}.dec1"), &self.dec1),
            ssean1: self.ssean1.bind_collect(b, &format!("{prefix}.ssean1")),
            dec2: b.conv(&format!("{prefix}.dec2"), &self.dec2),
            ssean2: self.ssean2.bind_collect(b, &format!("{prefix}.ssean2")),
            to_rgb: b.conv(&format!("{prefix}.to_rgb"), &self.to_rgb),
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, conv) in [("enc1", &self.enc1), ("enc2", &self.enc2), ("enc3", &self.enc3)] {
            out.push((format!("{prefix}.{name}.weight"), &conv.weight));
            out.push((format!("{prefix}.{name}.bias"), &conv.bias));
        }
        out.push((format!("{prefix}.dec1.weight"), &self.dec1.weight));
        out.push((format!("{prefix}.dec1.bias"), &self.dec1.bias));
        out.extend(self.ssean1.named_tensors(&format!("{prefix}.ssean1")));
        out.push((format!("{prefix}.dec2.weight"), &self.dec2.weight));
        out.push((format!("{prefix}.dec2.bias"), &self.dec2.bias));
        out.extend(self.ssean2.named_tensors(&format!("{prefix}.ssean2")));
        out.push((format!("{prefix}.to_rgb.weight"), &self.to_rgb.weight));
        out.push((format!("{prefix}.to_rgb.bias"), &self.to_rgb.bias));
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (name, conv) in [
            ("enc1", &mut self.enc1),
            ("enc2", &mut self.enc2),
            ("enc3", &mut self.enc3),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &mut conv.weight));
            out.push((format!("{prefix}.{name}.bias"), &mut conv.bias));
        }
        out.push((format!("{prefix}.dec1.weight"), &mut self.dec1.weight));
        out.push((format!("{prefix}.dec1.bias"), &mut self.dec1.bias));
        out.extend(self.ssean1.named_tensors_mut(&format!("{prefix}.ssean1")));
        out.push((format!("{prefix}.dec2.weight"), &mut self.dec2.weight));
        out.push((format!("{prefix}.dec2.bias"), &mut self.dec2.bias));
        out.extend(self.ssean2.named_tensors_mut(&format!("{prefix}.ssean2")));
        out.push((format!("{prefix}.to_rgb.weight"), &mut self.to_rgb.weight));
        out.push((format!("{prefix}.to_rgb.bias"), &mut self.to_rgb.bias));
        out
    }
}

pub struct RefineNetVars<T: Scalar> {
    pub enc1: Conv2dVars<T>,
    pub enc2: Conv2dVars<T>,
    pub enc3: Conv2dVars<T>,
    pub dec1: Conv2dVars<T>,
    pub ssean1: SseanBlockVars<T>,
    pub dec2: Conv2dVars<T>,
    pub ssean2: SseanBlockVars<T>,
    pub to_rgb: Conv2dVars<T>,
}

/// Refine the composite. Every decoder block is modulated with the layout
/// map and style codes; the final image is re-composited so known pixels
/// pass through untouched.
pub fn refine_forward<T: Scalar>(
    net: &RefineNetVars<T>,
    comp: &Var<T>,
    fg_mask: &Tensor<T>,
    m_probs: &Var<T>,
    st: &Var<T>,
    i_f: &Tensor<T>,
) -> Result<Var<T>> {
    let s = comp.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!("refine input must be [N, 3, H, W], got {s:?}")));
    }
    let tape = comp.tape();
    let lrelu = |x: &Var<T>| nn::leaky_relu(x, LRELU_SLOPE);
    let mask_var = tape.constant(fg_mask.clone());
    let x = ops::concat_channels(&[comp, &mask_var])?;
    let e1 = lrelu(&net.enc1.apply(&x)?);
    let e2 = lrelu(&nn::instance_norm(&net.enc2.apply(&e1)?, NORM_EPS)?);
    let e3 = lrelu(&nn::instance_norm(&net.enc3.apply(&e2)?, NORM_EPS)?);

    let d1 = net.dec1.apply(&nn::upsample_nearest(&e3, 2)?)?;
    let d1 = lrelu(&ssean_block(&net.ssean1, &d1, st, m_probs)?);
    let d2 = net.dec2.apply(&nn::upsample_nearest(&d1, 2)?)?;
    let d2 = lrelu(&ssean_block(&net.ssean2, &d2, st, m_probs)?);

    let raw = nn::tanh(&net.to_rgb.apply(&nn::upsample_nearest(&d2, 2)?)?);
    composite(i_f, &raw, fg_mask)
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Three stride-2 conv layers and a 1-channel score head; each score covers
/// a local patch (receptive field well under the image size).
#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T: Scalar> {
    pub c1: Conv2dParams<T>,
    pub c2: Conv2dParams<T>,
    pub c3: Conv2dParams<T>,
    pub score: Conv2dParams<T>,
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn init(meta: &ModelMeta, rng: &mut Rng) -> Result<Self> {
        let [w1, w2, w3] = REFINE_WIDTHS;
        let in_ch = 3 + meta.classes;
        Ok(PatchDiscriminator {
            c1: Conv2dParams::init(in_ch, w1, 3, 2, rng)?,
            c2: Conv2dParams::init(w1, w2, 3, 2, rng)?,
            c3: Conv2dParams::init(w2, w3, 3, 2, rng)?,
            score: Conv2dParams::init(w3, 1, 3, 1, rng)?,
        })
    }

    pub fn bind_collect(&self, b: &mut ParamBinder<'_, T>, prefix: &str) -> DiscriminatorVars<T> {
        DiscriminatorVars {
            c1: b.conv(&format!("{prefix}.c1"), &self.c1),
            c2: b.conv(&format!("{prefix}.c2"), &self.c2),
            c3: b.conv(&format!("{prefix}.c3"), &self.c3),
            score: b.conv(&format!("{prefix}.score"), &self.score),
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, conv) in [
            ("c1", &self.c1),
            ("c2", &self.c2),
            ("c3", &self.c3),
            ("score", &self.score),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &conv.weight));
            out.push((format!("{prefix}.{name}.bias"), &conv.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (name, conv) in [
            ("c1", &mut self.c1),
            ("c2", &mut self.c2),
            ("c3", &mut self.c3),
            ("score", &mut self.score),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &mut conv.weight));
            out.push((format!("{prefix}.{name}.bias"), &mut conv.bias));
        }
        out
    }
}

pub struct DiscriminatorVars<T: Scalar> {
    pub c1: Conv2dVars<T>,
    pub c2: Conv2dVars<T>,
    pub c3: Conv2dVars<T>,
    pub score: Conv2dVars<T>,
}

/// Patch scores for an image conditioned on its semantic map.
///
/// The stack is norm-free so each score depends only on its receptive
/// field, keeping decisions strictly patch-local.
pub fn discriminate<T: Scalar>(
    net: &DiscriminatorVars<T>,
    img: &Var<T>,
    m_probs: &Var<T>,
) -> Result<Var<T>> {
    let lrelu = |x: &Var<T>| nn::leaky_relu(x, LRELU_SLOPE);
    let x = ops::concat_channels(&[img, m_probs])?;
    let e1 = lrelu(&net.c1.apply(&x)?);
    let e2 = lrelu(&net.c2.apply(&e1)?);
    let e3 = lrelu(&net.c3.apply(&e2)?);
    net.score.apply(&e3)
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FullModel<T: Scalar> {
    pub meta: ModelMeta,
    pub coarse: CoarseNet<T>,
    pub style_enc: StyleEncoderParams<T>,
    pub refine: RefineNet<T>,
    pub disc: PatchDiscriminator<T>,
}

/// All tape-bound generator parts.
pub struct GeneratorVars<T: Scalar> {
    pub coarse: CoarseNetVars<T>,
    pub style: StyleEncoderVars<T>,
    pub refine: RefineNetVars<T>,
    /// `(name, var)` pairs in the same order as `generator_named_tensors`.
    pub entries: Vec<(String, Var<T>)>,
}

pub struct DiscVars<T: Scalar> {
    pub disc: DiscriminatorVars<T>,
    pub entries: Vec<(String, Var<T>)>,
}

/// Outputs of one full generator pass.
pub struct PipelineOut<T: Scalar> {
    pub i_c: Var<T>,
    pub layout_logits: Var<T>,
    pub m_probs: Var<T>,
    pub st: Var<T>,
    pub comp: Var<T>,
    pub refined: Var<T>,
}

impl<T: Scalar> FullModel<T> {
    pub fn init(meta: ModelMeta, seed: u64) -> Result<Self> {
        meta.validate()?;
        let mut rng = Rng::new(seed);
        let style_hidden = 16;
        Ok(FullModel {
            coarse: CoarseNet::init(&meta, &mut rng)?,
            style_enc: StyleEncoderParams::init(
                meta.style_dim,
                style_hidden,
                Some(meta.k_sharpen),
                &mut rng,
            )?,
            refine: RefineNet::init(&meta, &mut rng)?,
            disc: PatchDiscriminator::init(&meta, &mut rng)?,
            meta,
        })
    }

    pub fn bind_generator(&self, tape: &Tape<T>, trainable: bool) -> GeneratorVars<T> {
        let mut b = ParamBinder::new(tape, trainable);
        let coarse = self.coarse.bind_collect(&mut b, "coarse");
        let style = self.style_enc.bind_collect(&mut b, "style");
        let refine = self.refine.bind_collect(&mut b, "refine");
        GeneratorVars {
            coarse,
            style,
            refine,
            entries: b.into_entries(),
        }
    }

    pub fn bind_discriminator(&self, tape: &Tape<T>, trainable: bool) -> DiscVars<T> {
        let mut b = ParamBinder::new(tape, trainable);
        let disc = self.disc.bind_collect(&mut b, "disc");
        DiscVars {
            disc,
            entries: b.into_entries(),
        }
    }

    pub fn generator_named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.coarse.named_tensors("coarse");
        out.extend(self.style_enc.named_tensors("style"));
        out.extend(self.refine.named_tensors("refine"));
        out
    }

    pub fn generator_named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.coarse.named_tensors_mut("coarse");
        out.extend(self.style_enc.named_tensors_mut("style"));
        out.extend(self.refine.named_tensors_mut("refine"));
        out
    }

    pub fn disc_named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.disc.named_tensors("disc")
    }

    pub fn disc_named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.disc.named_tensors_mut("disc")
    }

    pub fn all_named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.generator_named_tensors();
        out.extend(self.disc_named_tensors());
        out
    }

    pub fn all_named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let FullModel {
            coarse,
            style_enc,
            refine,
            disc,
            ..
        } = self;
        let mut out = coarse.named_tensors_mut("coarse");
        out.extend(style_enc.named_tensors_mut("style"));
        out.extend(refine.named_tensors_mut("refine"));
        out.extend(disc.named_tensors_mut("disc"));
        out
    }

    /// Full generator pass: mask is applied by the caller (`i_f` is the
    /// already-masked input batch).
    pub fn generator_forward(
        &self,
        gen: &GeneratorVars<T>,
        i_f: &Tensor<T>,
        fg_mask: &Tensor<T>,
        tape: &Tape<T>,
    ) -> Result<PipelineOut<T>> {
        let i_f_var = tape.constant(i_f.clone());
        let coarse = coarse_forward(&gen.coarse, &i_f_var)?;
        let comp = composite(i_f, &coarse.i_c, fg_mask)?;
        let st = gen.style.encode(&i_f_var, &coarse.m_probs)?;
        let refined = refine_forward(&gen.refine, &comp, fg_mask, &coarse.m_probs, &st, i_f)?;
        Ok(PipelineOut {
            i_c: coarse.i_c,
            layout_logits: coarse.layout_logits,
            m_probs: coarse.m_probs,
            st,
            comp,
            refined,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = format!(
            "version=1\ndtype={}\nheight={}\nwidth={}\nclasses={}\nstyle_dim={}\nk_sharpen={}\n",
            match T::DTYPE {
                crate::tensor::Dtype::F32 => "f32",
                crate::tensor::Dtype::F64 => "f64",
            },
            self.meta.height,
            self.meta.width,
            self.meta.classes,
            self.meta.style_dim,
            self.meta.k_sharpen,
        );
        let mut entries = vec![("meta.txt".to_string(), meta.into_bytes())];
        for (name, tensor) in self.all_named_tensors() {
            entries.push((name, tensor_to_bytes(tensor)?));
        }
        write_archive(path, &entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let entries = read_archive(&path)?;
        let mut blobs: HashMap<String, Vec<u8>> = entries.into_iter().collect();
        let meta_text = blobs
            .remove("meta.txt")
            .ok_or_else(|| Error::Format("checkpoint is missing meta.txt".into()))?;
        let meta_text = String::from_utf8(meta_text)
            .map_err(|_| Error::Format("meta.txt is not utf-8".into()))?;
        let mut kv = HashMap::new();
        for line in meta_text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint meta missing {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint meta field {k} unparseable")))
        };
        let dtype = get("dtype")?.clone();
        let expected = match T::DTYPE {
            crate::tensor::Dtype::F32 => "f32",
            crate::tensor::Dtype::F64 => "f64",
        };
        if dtype != expected {
            return Err(Error::Format(format!(
                "checkpoint dtype {dtype} does not match requested {expected}"
            )));
        }
        let meta = ModelMeta {
            height: parse_usize("height")?,
            width: parse_usize("width")?,
            classes: parse_usize("classes")?,
            style_dim: parse_usize("style_dim")?,
            k_sharpen: get("k_sharpen")?
                .parse()
                .map_err(|_| Error::Format("bad k_sharpen in checkpoint".into()))?,
        };
        let mut model = FullModel::init(meta, 0)?;
        for (name, tensor) in model.all_named_tensors_mut() {
            let blob = blobs
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
            let loaded = tensor_from_bytes::<T>(&blob)?;
            if loaded.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
            *tensor = loaded;
        }
        Ok(model)
    }
}
