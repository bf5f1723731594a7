//! Soft semantic region-adaptive normalization.
//!
//! A semantic map carries a per-pixel probability distribution over classes
//! instead of hard labels. Style codes are pooled per class by a
//! probability-weighted average, broadcast back as a per-pixel convex
//! combination, and used to produce the scale/shift that modulates
//! instance-normalized activations. Every step is differentiable in every
//! input, including the semantic map itself; the classic hard-label block
//! is kept as a reference path for equivalence checks.
//!
//! Layouts: semantic maps are `[N, C, H, W]`, style matrices `[N, C, D]`,
//! style maps `[N, D, H, W]`.

use crate::autodiff::{ops, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, kernels, Conv2dParams, Conv2dVars};
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_abt, matmul_atb, LabelMap, Scalar, Tensor};

/// Sharpening temperature used throughout unless overridden.
pub const DEFAULT_SHARPEN_K: f64 = 0.1;

/// Denominator guard for empty classes in region pooling.
pub const DEFAULT_POOL_EPS: f64 = 1e-8;

/// Tolerance on per-pixel probability sums.
pub const PROB_SUM_TOL: f64 = 1e-5;

/// Per-pixel class distribution, `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct SemanticMap<T: Scalar> {
    probs: Tensor<T>,
}

impl<T: Scalar> SemanticMap<T> {
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "semantic map must be [N, C, H, W], got {s:?}"
            )));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let data = probs.data();
        for ni in 0..n {
            for p in 0..plane {
                let mut sum = 0.0;
                for ci in 0..c {
                    let v = data[(ni * c + ci) * plane + p].to_f64();
                    if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                        return Err(Error::Numeric(format!(
                            "semantic map probability {v} outside [0, 1]"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::Numeric(format!(
                        "semantic map pixel sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(SemanticMap { probs })
    }

    /// One-hot encoding of hard labels.
    pub fn from_labels(labels: &LabelMap, classes: usize) -> Result<Self> {
        let s = labels.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!(
                "labels must be [N, H, W], got {s:?}"
            )));
        }
        labels.ensure_in_range(classes)?;
        let (n, h, w) = (s[0], s[1], s[2]);
        let plane = h * w;
        let mut data = vec![T::ZERO; n * classes * plane];
        for ni in 0..n {
            for p in 0..plane {
                let c = labels.data()[ni * plane + p] as usize;
                data[(ni * classes + c) * plane + p] = T::ONE;
            }
        }
        Ok(SemanticMap {
            probs: Tensor::from_vec(&[n, classes, h, w], data)?,
        })
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn into_probs(self) -> Tensor<T> {
        self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    /// Hard labels by per-pixel argmax (first maximum on ties).
    pub fn argmax_labels(&self) -> LabelMap {
        let s = self.probs.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let data = self.probs.data();
        let mut labels = vec![0u8; n * plane];
        for ni in 0..n {
            for p in 0..plane {
                let mut best = 0usize;
                let mut best_v = data[ni * c * plane + p];
                for ci in 1..c {
                    let v = data[(ni * c + ci) * plane + p];
                    if v > best_v {
                        best_v = v;
                        best = ci;
                    }
                }
                labels[ni * plane + p] = best as u8;
            }
        }
        LabelMap::new(&[n, s[2], s[3]], labels).expect("valid shape")
    }
}

/// One style code per class, `[N, C, D]`.
#[derive(Debug, Clone)]
pub struct StyleMatrix<T: Scalar> {
    pub codes: Tensor<T>,
}

impl<T: Scalar> StyleMatrix<T> {
    pub fn new(codes: Tensor<T>) -> Result<Self> {
        if codes.rank() != 3 {
            return Err(Error::Shape(format!(
                "style matrix must be [N, C, D], got {:?}",
                codes.shape()
            )));
        }
        codes.ensure_finite("style matrix")?;
        Ok(StyleMatrix { codes })
    }
}

/// Per-pixel style field, `[N, D, H, W]`.
#[derive(Debug, Clone)]
pub struct StyleMap<T: Scalar> {
    pub field: Tensor<T>,
}

/// Polarize a semantic map: `p' = softmax(p / K)` across channels.
///
/// Small `K` pushes the distribution toward one-hot; large `K` toward
/// uniform. The per-pixel argmax never changes.
pub fn sharpen<T: Scalar>(m: &Var<T>, k: f64) -> Result<Var<T>> {
    if k <= 0.0 {
        return Err(Error::Parameter(format!(
            "sharpening constant must be positive, got {k}"
        )));
    }
    nn::softmax_channels(&ops::scale(m, 1.0 / k))
}

fn check_pool_shapes(styles: &[usize], m: &[usize]) -> Result<()> {
    if styles.len() != 4 || m.len() != 4 {
        return Err(Error::Shape(format!(
            "region_pool expects [N, D, H, W] styles and [N, C, H, W] map, got {styles:?} / {m:?}"
        )));
    }
    if styles[0] != m[0] || styles[2] != m[2] || styles[3] != m[3] {
        return Err(Error::Shape(format!(
            "region_pool: styles {styles:?} and semantic map {m:?} disagree"
        )));
    }
    Ok(())
}

/// Probability-weighted regional average:
/// `s[n, c, :] = sum_ij p[n, c, ij] * styles[n, :, ij] / (sum_ij p[n, c, ij] + eps)`.
///
/// Classes with no support yield a zero code. Differentiable in both the
/// style field and the semantic map.
pub fn region_pool<T: Scalar>(styles: &Var<T>, m: &Var<T>, eps: f64) -> Result<Var<T>> {
    let (ss, ms) = (styles.shape(), m.shape());
    check_pool_shapes(&ss, &ms)?;
    let (n, d, c) = (ss[0], ss[1], ms[1]);
    let plane = ss[2] * ss[3];
    let epsv = T::from_f64(eps);

    let mut denom = vec![T::ZERO; n * c];
    let mut out = vec![T::ZERO; n * c * d];
    styles.with_value(|sv| {
        m.with_value(|mv| {
            for ni in 0..n {
                let ps = &mv.data()[ni * c * plane..(ni + 1) * c * plane];
                let xs = &sv.data()[ni * d * plane..(ni + 1) * d * plane];
                for ci in 0..c {
                    let mut acc = T::ZERO;
                    for &p in &ps[ci * plane..(ci + 1) * plane] {
                        acc += p;
                    }
                    denom[ni * c + ci] = acc + epsv;
                }
                // num[c, d] = p [C, HW] x styles^T [HW, D]
                let os = &mut out[ni * c * d..(ni + 1) * c * d];
                matmul_abt(ps, xs, c, plane, d, os);
                for ci in 0..c {
                    let dn = denom[ni * c + ci];
                    for v in &mut os[ci * d..(ci + 1) * d] {
                        *v = *v / dn;
                    }
                }
            }
        })
    });
    let value = Tensor::from_vec(&[n, c, d], out)?;

    Ok(styles.tape().record(&[styles, m], value, move || {
        Box::new(move |args| {
            let g = args.grad_out.data();
            let (sv, mv) = (args.inputs[0], args.inputs[1]);
            let pooled = args.output.data();
            // a[n, c, d] = g[n, c, d] / denom[n, c]
            let mut a = vec![T::ZERO; n * c * d];
            for ni in 0..n {
                for ci in 0..c {
                    let dn = denom[ni * c + ci];
                    for di in 0..d {
                        let idx = (ni * c + ci) * d + di;
                        a[idx] = g[idx] / dn;
                    }
                }
            }
            let g_styles = args.needs[0].then(|| {
                let mut buf = vec![T::ZERO; n * d * plane];
                for ni in 0..n {
                    let an = &a[ni * c * d..(ni + 1) * c * d];
                    let pn = &mv.data()[ni * c * plane..(ni + 1) * c * plane];
                    let on = &mut buf[ni * d * plane..(ni + 1) * d * plane];
                    // gx[d, ij] = sum_c a[c, d] * p[c, ij]
                    matmul_atb(an, pn, d, c, plane, on);
                }
                Tensor::from_vec(&[n, d, ss[2], ss[3]], buf).expect("valid shape")
            });
            let g_m = args.needs[1].then(|| {
                let mut buf = vec![T::ZERO; n * c * plane];
                for ni in 0..n {
                    let an = &a[ni * c * d..(ni + 1) * c * d];
                    let xn = &sv.data()[ni * d * plane..(ni + 1) * d * plane];
                    let on = &mut buf[ni * c * plane..(ni + 1) * c * plane];
                    // gp[c, ij] = sum_d a[c, d] * (x[d, ij] - s[c, d])
                    matmul(an, xn, c, d, plane, on);
                    for ci in 0..c {
                        let mut shift = T::ZERO;
                        for di in 0..d {
                            shift += an[ci * d + di] * pooled[(ni * c + ci) * d + di];
                        }
                        for v in &mut on[ci * plane..(ci + 1) * plane] {
                            *v = *v - shift;
                        }
                    }
                }
                Tensor::from_vec(&[n, c, ss[2], ss[3]], buf).expect("valid shape")
            });
            vec![g_styles, g_m]
        })
    }))
}

/// Fill the style map with per-pixel convex combinations of class codes:
/// `sm[n, :, ij] = sum_c p[n, c, ij] * st[n, c, :]`.
pub fn soft_broadcast<T: Scalar>(st: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
    let (ts, ms) = (st.shape(), m.shape());
    if ts.len() != 3 || ms.len() != 4 {
        return Err(Error::Shape(format!(
            "soft_broadcast expects [N, C, D] styles and [N, C, H, W] map, got {ts:?} / {ms:?}"
        )));
    }
    if ts[0] != ms[0] || ts[1] != ms[1] {
        return Err(Error::Shape(format!(
            "soft_broadcast: class count mismatch between styles {ts:?} and map {ms:?}"
        )));
    }
    let (n, c, d) = (ts[0], ts[1], ts[2]);
    let (h, w) = (ms[2], ms[3]);
    let plane = h * w;
    let mut out = vec![T::ZERO; n * d * plane];
    st.with_value(|stv| {
        m.with_value(|mv| {
            for ni in 0..n {
                let sn = &stv.data()[ni * c * d..(ni + 1) * c * d];
                let pn = &mv.data()[ni * c * plane..(ni + 1) * c * plane];
                let on = &mut out[ni * d * plane..(ni + 1) * d * plane];
                // sm[d, ij] = sum_c st[c, d] * p[c, ij]
                matmul_atb(sn, pn, d, c, plane, on);
            }
        })
    });
    let value = Tensor::from_vec(&[n, d, h, w], out)?;

    Ok(st.tape().record(&[st, m], value, move || {
        Box::new(move |args| {
            let g = args.grad_out.data();
            let (stv, mv) = (args.inputs[0], args.inputs[1]);
            let g_st = args.needs[0].then(|| {
                let mut buf = vec![T::ZERO; n * c * d];
                for ni in 0..n {
                    let pn = &mv.data()[ni * c * plane..(ni + 1) * c * plane];
                    let gn = &g[ni * d * plane..(ni + 1) * d * plane];
                    let on = &mut buf[ni * c * d..(ni + 1) * c * d];
                    // gst[c, d] = sum_ij p[c, ij] * g[d, ij]
                    matmul_abt(pn, gn, c, plane, d, on);
                }
                Tensor::from_vec(&[n, c, d], buf).expect("valid shape")
            });
            let g_m = args.needs[1].then(|| {
                let mut buf = vec![T::ZERO; n * c * plane];
                for ni in 0..n {
                    let sn = &stv.data()[ni * c * d..(ni + 1) * c * d];
                    let gn = &g[ni * d * plane..(ni + 1) * d * plane];
                    let on = &mut buf[ni * c * plane..(ni + 1) * c * plane];
                    // gp[c, ij] = sum_d st[c, d] * g[d, ij]
                    matmul(sn, gn, c, d, plane, on);
                }
                Tensor::from_vec(&[n, c, h, w], buf).expect("valid shape")
            });
            vec![g_st, g_m]
        })
    }))
}

/// Style encoder: a small conv stack produces a per-pixel style field that
/// is pooled per class under the (optionally sharpened) semantic map.
#[derive(Debug, Clone)]
pub struct StyleEncoderParams<T: Scalar> {
    pub conv1: Conv2dParams<T>,
    pub conv2: Conv2dParams<T>,
    pub proj: Conv2dParams<T>,
    pub k_sharpen: Option<f64>,
    pub pool_eps: f64,
}

impl<T: Scalar> StyleEncoderParams<T> {
    pub fn init(style_dim: usize, hidden: usize, k_sharpen: Option<f64>, rng: &mut Rng) -> Result<Self> {
        Ok(StyleEncoderParams {
            conv1: Conv2dParams::init(3, hidden, 3, 2, rng)?,
            conv2: Conv2dParams::init(hidden, hidden, 3, 1, rng)?,
            proj: Conv2dParams::init(hidden, style_dim, 1, 1, rng)?,
            k_sharpen,
            pool_eps: DEFAULT_POOL_EPS,
        })
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> StyleEncoderVars<T> {
        let mut binder = nn::ParamBinder::new(tape, trainable);
        self.bind_collect(&mut binder, "style")
    }

    pub fn bind_collect(&self, b: &mut nn::ParamBinder<'_, T>, prefix: &str) -> StyleEncoderVars<T> {
        StyleEncoderVars {
            conv1: b.conv(&format!("{prefix}.conv1"), &self.conv1),
            conv2: b.conv(&format!("{prefix}.conv2"), &self.conv2),
            proj: b.conv(&format!("{prefix}.proj"), &self.proj),
            k_sharpen: self.k_sharpen,
            pool_eps: self.pool_eps,
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, conv) in [
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("proj", &self.proj),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &conv.weight));
            out.push((format!("{prefix}.{name}.bias"), &conv.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (name, conv) in [
            ("conv1", &mut self.conv1),
            ("conv2", &mut self.conv2),
            ("proj", &mut self.proj),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &mut conv.weight));
            out.push((format!("{prefix}.{name}.bias"), &mut conv.bias));
        }
        out
    }
}

pub struct StyleEncoderVars<T: Scalar> {
    pub conv1: Conv2dVars<T>,
    pub conv2: Conv2dVars<T>,
    pub proj: Conv2dVars<T>,
    pub k_sharpen: Option<f64>,
    pub pool_eps: f64,
}

impl<T: Scalar> StyleEncoderVars<T> {
    /// Encode one style code per class from an image and its semantic map.
    /// Returns `[N, C, D]`.
    pub fn encode(&self, image: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
        let f1 = nn::leaky_relu(&self.conv1.apply(image)?, 0.2);
        let f2 = nn::leaky_relu(&self.conv2.apply(&f1)?, 0.2);
        let st_tilde = self.proj.apply(&f2)?;
        let s = st_tilde.shape();
        let m_resized = resize_map_to(m, s[2], s[3])?;
        let m_final = match self.k_sharpen {
            Some(k) => sharpen(&m_resized, k)?,
            None => m_resized,
        };
        region_pool(&st_tilde, &m_final, self.pool_eps)
    }
}

fn resize_map_to<T: Scalar>(m: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let s = m.shape();
    if s[2] == h && s[3] == w {
        Ok(m.clone())
    } else {
        nn::resize_nearest(m, h, w)
    }
}

/// Parameters of one modulation block.
///
/// `style_projection` is a 1x1 convolution acting as a shared `D -> D`
/// linear map on each class row of the style matrix. `gamma_conv` and
/// `beta_conv` map the concatenated (style map, semantic map) to per-pixel
/// scale and shift.
#[derive(Debug, Clone)]
pub struct SseanBlockParams<T: Scalar> {
    pub style_projection: Conv2dParams<T>,
    pub gamma_conv: Conv2dParams<T>,
    pub beta_conv: Conv2dParams<T>,
    /// `None` disables sharpening (hard-equivalence mode).
    pub k_sharpen: Option<f64>,
    pub norm_eps: f64,
}

impl<T: Scalar> SseanBlockParams<T> {
    pub fn init(
        activation_channels: usize,
        classes: usize,
        style_dim: usize,
        k_sharpen: Option<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let style_projection = Conv2dParams::init(style_dim, style_dim, 1, 1, rng)?;
        // gamma starts near 1 and beta near 0 so the block begins as a
        // plain instance norm
        let mut gamma_conv =
            Conv2dParams::init(style_dim + classes, activation_channels, 3, 1, rng)?;
        gamma_conv.weight = gamma_conv.weight.scale(T::from_f64(0.1));
        gamma_conv.bias = Tensor::ones(&[activation_channels])?;
        let mut beta_conv =
            Conv2dParams::init(style_dim + classes, activation_channels, 3, 1, rng)?;
        beta_conv.weight = beta_conv.weight.scale(T::from_f64(0.1));
        Ok(SseanBlockParams {
            style_projection,
            gamma_conv,
            beta_conv,
            k_sharpen,
            norm_eps: 1e-5,
        })
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> SseanBlockVars<T> {
        let mut binder = nn::ParamBinder::new(tape, trainable);
        self.bind_collect(&mut binder, "ssean")
    }

    pub fn bind_collect(&self, b: &mut nn::ParamBinder<'_, T>, prefix: &str) -> SseanBlockVars<T> {
        SseanBlockVars {
            style_projection: b.conv(&format!("{prefix}.style_projection"), &self.style_projection),
            gamma_conv: b.conv(&format!("{prefix}.gamma_conv"), &self.gamma_conv),
            beta_conv: b.conv(&format!("{prefix}.beta_conv"), &self.beta_conv),
            k_sharpen: self.k_sharpen,
            norm_eps: self.norm_eps,
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, conv) in [
            ("style_projection", &self.style_projection),
            ("gamma_conv", &self.gamma_conv),
            ("beta_conv", &self.beta_conv),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &conv.weight));
            out.push((format!("{prefix}.{name}.bias"), &conv.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (name, conv) in [
            ("style_projection", &mut self.style_projection),
            ("gamma_conv", &mut self.gamma_conv),
            ("beta_conv", &mut self.beta_conv),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &mut conv.weight));
            out.push((format!("{prefix}.{name}.bias"), &mut conv.bias));
        }
        out
    }
}

pub struct SseanBlockVars<T: Scalar> {
    pub style_projection: Conv2dVars<T>,
    pub gamma_conv: Conv2dVars<T>,
    pub beta_conv: Conv2dVars<T>,
    pub k_sharpen: Option<f64>,
    pub norm_eps: f64,
}

/// Project class rows of `[N, C, D]` through the block's 1x1 style
/// projection.
fn project_styles<T: Scalar>(block: &SseanBlockVars<T>, st: &Var<T>) -> Result<Var<T>> {
    let s = st.shape();
    let (n, c, d) = (s[0], s[1], s[2]);
    let rows = ops::reshape(st, &[n * c, d])?;
    let w2 = ops::reshape(&block.style_projection.weight, &[d, d])?;
    let projected = ops::linear(&rows, &w2, &block.style_projection.bias)?;
    ops::reshape(&projected, &[n, c, d])
}

/// Modulate an activation with per-region style:
/// sharpen the map, project the style matrix, broadcast it softly, derive
/// per-pixel scale/shift, and apply them to the instance-normalized
/// activation. Differentiable in the activation, the style matrix, the
/// semantic map, and all block parameters.
pub fn ssean_block<T: Scalar>(
    block: &SseanBlockVars<T>,
    activation: &Var<T>,
    st: &Var<T>,
    m: &Var<T>,
) -> Result<Var<T>> {
    let a_shape = activation.shape();
    if a_shape.len() != 4 {
        return Err(Error::Shape(format!(
            "activation must be [N, C, H, W], got {a_shape:?}"
        )));
    }
    let m_resized = resize_map_to(m, a_shape[2], a_shape[3])?;
    let m_final = match block.k_sharpen {
        Some(k) => sharpen(&m_resized, k)?,
        None => m_resized,
    };
    let s_prime = project_styles(block, st)?;
    let sm = soft_broadcast(&s_prime, &m_final)?;
    let ctx = ops::concat_channels(&[&sm, &m_final])?;
    let gamma = block.gamma_conv.apply(&ctx)?;
    let beta = block.beta_conv.apply(&ctx)?;
    let normed = nn::instance_norm(activation, block.norm_eps)?;
    ops::add(&ops::mul(&gamma, &normed)?, &beta)
}

// ---------------------------------------------------------------------------
// Hard-label reference path
// ---------------------------------------------------------------------------

/// Nearest-neighbor resize of integer labels, same index mapping as the
/// tensor resize.
pub fn resize_labels_nearest(labels: &LabelMap, h2: usize, w2: usize) -> Result<LabelMap> {
    let s = labels.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("labels must be [N, H, W], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0u8; n * h2 * w2];
    for ni in 0..n {
        let src = &labels.data()[ni * h * w..(ni + 1) * h * w];
        let dst = &mut out[ni * h2 * w2..(ni + 1) * h2 * w2];
        for i2 in 0..h2 {
            let i = i2 * h / h2;
            for j2 in 0..w2 {
                dst[i2 * w2 + j2] = src[i * w + j2 * w / w2];
            }
        }
    }
    LabelMap::new(&[n, h2, w2], out)
}

/// Hard region-average pooling: plain mean of the style field over each
/// class's pixels, with the same denominator guard as the soft path.
pub fn region_pool_onehot<T: Scalar>(
    styles: &Tensor<T>,
    labels: &LabelMap,
    classes: usize,
    eps: f64,
) -> Result<Tensor<T>> {
    let ss = styles.shape();
    if ss.len() != 4 {
        return Err(Error::Shape(format!(
            "styles must be [N, D, H, W], got {ss:?}"
        )));
    }
    labels.ensure_in_range(classes)?;
    let (n, d, plane) = (ss[0], ss[1], ss[2] * ss[3]);
    if labels.shape() != [n, ss[2], ss[3]] {
        return Err(Error::Shape(format!(
            "labels {:?} do not match style field {ss:?}",
            labels.shape()
        )));
    }
    let epsv = T::from_f64(eps);
    let mut out = vec![T::ZERO; n * classes * d];
    for ni in 0..n {
        let lab = &labels.data()[ni * plane..(ni + 1) * plane];
        let xs = &styles.data()[ni * d * plane..(ni + 1) * d * plane];
        for ci in 0..classes {
            let mut count = T::ZERO;
            for &l in lab {
                if l as usize == ci {
                    count += T::ONE;
                }
            }
            let denom = count + epsv;
            for di in 0..d {
                let mut acc = T::ZERO;
                let xplane = &xs[di * plane..(di + 1) * plane];
                for (p, &l) in lab.iter().enumerate() {
                    if l as usize == ci {
                        acc += xplane[p];
                    }
                }
                out[(ni * classes + ci) * d + di] = acc / denom;
            }
        }
    }
    Tensor::from_vec(&[n, classes, d], out)
}

/// Hard broadcast: each pixel copies exactly its class's style code.
pub fn broadcast_onehot<T: Scalar>(st: &Tensor<T>, labels: &LabelMap) -> Result<Tensor<T>> {
    let ts = st.shape();
    let ls = labels.shape();
    if ts.len() != 3 || ls.len() != 3 || ts[0] != ls[0] {
        return Err(Error::Shape(format!(
            "broadcast_onehot: styles {ts:?} vs labels {ls:?}"
        )));
    }
    labels.ensure_in_range(ts[1])?;
    let (n, c, d) = (ts[0], ts[1], ts[2]);
    let (h, w) = (ls[1], ls[2]);
    let plane = h * w;
    let mut out = vec![T::ZERO; n * d * plane];
    for ni in 0..n {
        let lab = &labels.data()[ni * plane..(ni + 1) * plane];
        for (p, &l) in lab.iter().enumerate() {
            let code = &st.data()[(ni * c + l as usize) * d..(ni * c + l as usize + 1) * d];
            for di in 0..d {
                out[(ni * d + di) * plane + p] = code[di];
            }
        }
    }
    Tensor::from_vec(&[n, d, h, w], out)
}

/// Hard-label reference block: identical pipeline to [`ssean_block`] but
/// with hard broadcast, no sharpening, and no gradients with respect to
/// the labels.
pub fn sean_block_onehot<T: Scalar>(
    params: &SseanBlockParams<T>,
    activation: &Tensor<T>,
    st: &Tensor<T>,
    labels: &LabelMap,
) -> Result<Tensor<T>> {
    let a_shape = activation.shape().to_vec();
    if a_shape.len() != 4 {
        return Err(Error::Shape(format!(
            "activation must be [N, C, H, W], got {a_shape:?}"
        )));
    }
    let ts = st.shape().to_vec();
    if ts.len() != 3 {
        return Err(Error::Shape(format!(
            "style matrix must be [N, C, D], got {ts:?}"
        )));
    }
    let classes = ts[1];
    labels.ensure_in_range(classes)?;
    let labels_r = if labels.shape()[1] == a_shape[2] && labels.shape()[2] == a_shape[3] {
        labels.clone()
    } else {
        resize_labels_nearest(labels, a_shape[2], a_shape[3])?
    };

    // shared D -> D projection of each class row
    let (n, c, d) = (ts[0], ts[1], ts[2]);
    let wp = params.style_projection.weight.reshaped(&[d, d])?;
    let mut projected = vec![T::ZERO; n * c * d];
    matmul_abt(st.data(), wp.data(), n * c, d, d, &mut projected);
    for row in projected.chunks_exact_mut(d) {
        for (v, &b) in row.iter_mut().zip(params.style_projection.bias.data()) {
            *v = *v + b;
        }
    }
    let s_prime = Tensor::from_vec(&[n, c, d], projected)?;

    let sm = broadcast_onehot(&s_prime, &labels_r)?;
    let onehot = SemanticMap::from_labels(&labels_r, classes)?;

    // concat (style map, one-hot map) along channels
    let plane = a_shape[2] * a_shape[3];
    let total_c = d + classes;
    let mut ctx = vec![T::ZERO; n * total_c * plane];
    for ni in 0..n {
        let dst = &mut ctx[ni * total_c * plane..(ni + 1) * total_c * plane];
        dst[..d * plane].copy_from_slice(&sm.data()[ni * d * plane..(ni + 1) * d * plane]);
        dst[d * plane..].copy_from_slice(
            &onehot.probs().data()[ni * classes * plane..(ni + 1) * classes * plane],
        );
    }
    let ctx = Tensor::from_vec(&[n, total_c, a_shape[2], a_shape[3]], ctx)?;

    let gamma = params.gamma_conv.apply_tensor(&ctx)?;
    let beta = params.beta_conv.apply_tensor(&ctx)?;
    let (normed, _) = kernels::instance_norm_forward(activation, params.norm_eps)?;
    normed.mul(&gamma)?.add(&beta)
}
