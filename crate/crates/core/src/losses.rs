//! Supervision terms: low-level L1 reconstruction, a high-level feature
//! loss through a frozen random extractor, hinge adversarial losses, and
//! the pixelwise cross-entropy on layout logits, combined into one weighted
//! objective with a per-term report.

use crate::autodiff::{ops, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, kernels, Conv2dParams, Conv2dVars};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_feat: f64,
    pub w_adv: f64,
    pub w_layout: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_l1: 1.0,
            w_feat: 0.1,
            w_adv: 0.01,
            w_layout: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_l1, self.w_feat, self.w_adv, self.w_layout];
        if all.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {all:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Unweighted values of each objective term for one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    pub feat: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub layout_ce: f64,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,total,l1,feat,adv_g,adv_d,layout_ce"
    }

    pub fn csv_line(&self, step: usize) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            step, self.total, self.l1, self.feat, self.adv_g, self.adv_d, self.layout_ce
        )
    }
}

/// Mean absolute error, optionally restricted to a binary region mask
/// `[N, 1, H, W]`. An empty mask falls back to the unmasked mean with a
/// warning.
pub fn l1_loss<T: Scalar>(
    pred: &Var<T>,
    target: &Var<T>,
    region_mask: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    let diff = ops::abs(&ops::sub(pred, target)?);
    match region_mask {
        None => Ok(ops::mean_all(&diff)),
        Some(mask) => {
            let ps = pred.shape();
            let ms = mask.shape();
            if ms.len() != 4 || ms[1] != 1 || ms[0] != ps[0] || ms[2] != ps[2] || ms[3] != ps[3] {
                return Err(Error::Shape(format!(
                    "region mask {ms:?} does not match prediction {ps:?}"
                )));
            }
            let mask_sum = mask.sum().to_f64();
            if mask_sum == 0.0 {
                log::warn!("empty region mask; falling back to unmasked L1");
                return Ok(ops::mean_all(&diff));
            }
            let channels = ps[1];
            let mask_c = expand_mask_channels(mask, channels)?;
            let count = mask_sum * channels as f64;
            let masked = ops::mul(&diff, &pred.tape().constant(mask_c))?;
            Ok(ops::scale(&ops::sum_all(&masked), 1.0 / count))
        }
    }
}

/// Tile a `[N, 1, H, W]` mask across `channels`.
pub fn expand_mask_channels<T: Scalar>(mask: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let s = mask.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("mask must be [N, 1, H, W], got {s:?}")));
    }
    let (n, plane) = (s[0], s[2] * s[3]);
    let mut data = vec![T::ZERO; n * channels * plane];
    for ni in 0..n {
        let src = &mask.data()[ni * plane..(ni + 1) * plane];
        for c in 0..channels {
            data[(ni * channels + c) * plane..(ni * channels + c + 1) * plane]
                .copy_from_slice(src);
        }
    }
    Tensor::from_vec(&[n, channels, s[2], s[3]], data)
}

/// Three frozen random conv layers, each followed by relu and 2x average
/// pooling. The weights are derived from a seed and never trained.
#[derive(Debug, Clone)]
pub struct FixedFeatureExtractor<T: Scalar> {
    pub convs: Vec<Conv2dParams<T>>,
}

impl<T: Scalar> FixedFeatureExtractor<T> {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        Ok(FixedFeatureExtractor {
            convs: vec![
                Conv2dParams::init(3, 8, 3, 1, &mut rng)?,
                Conv2dParams::init(8, 12, 3, 1, &mut rng)?,
                Conv2dParams::init(12, 16, 3, 1, &mut rng)?,
            ],
        })
    }

    pub fn bind(&self, tape: &Tape<T>) -> FixedFeatureVars<T> {
        FixedFeatureVars {
            convs: self.convs.iter().map(|c| c.bind(tape, false)).collect(),
        }
    }
}

pub struct FixedFeatureVars<T: Scalar> {
    convs: Vec<Conv2dVars<T>>,
}

impl<T: Scalar> FixedFeatureVars<T> {
    fn layers(&self, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let mut outs = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = nn::avg_pool2(&nn::relu(&conv.apply(&cur)?))?;
            outs.push(cur.clone());
        }
        Ok(outs)
    }
}

/// Sum over extractor layers of the mean absolute feature difference.
pub fn feature_loss<T: Scalar>(
    pred: &Var<T>,
    target: &Var<T>,
    fx: &FixedFeatureVars<T>,
) -> Result<Var<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "feature_loss: mismatched shapes {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let fp = fx.layers(pred)?;
    let ft = fx.layers(target)?;
    let mut total: Option<Var<T>> = None;
    for (a, b) in fp.iter().zip(&ft) {
        let term = ops::mean_all(&ops::abs(&ops::sub(a, b)?));
        total = Some(match total {
            None => term,
            Some(acc) => ops::add(&acc, &term)?,
        });
    }
    Ok(total.expect("extractor has layers"))
}

/// Hinge adversarial pair.
///
/// `loss_d = mean(relu(1 - d_real)) + mean(relu(1 + d_fake_for_d))`,
/// `loss_g = -mean(d_fake_for_g)`.
pub fn hinge_adv_losses<T: Scalar>(
    d_real: &Var<T>,
    d_fake_for_d: &Var<T>,
    d_fake_for_g: &Var<T>,
) -> Result<(Var<T>, Var<T>)> {
    let one_minus_real = ops::add_scalar(&ops::neg(d_real), 1.0);
    let one_plus_fake = ops::add_scalar(d_fake_for_d, 1.0);
    let loss_d = ops::add(
        &ops::mean_all(&nn::relu(&one_minus_real)),
        &ops::mean_all(&nn::relu(&one_plus_fake)),
    )?;
    let loss_g = ops::neg(&ops::mean_all(d_fake_for_g));
    Ok((loss_d, loss_g))
}

/// Mean pixelwise cross-entropy of logits against integer labels, fused
/// with its softmax for stability.
pub fn layout_ce<T: Scalar>(logits: &Var<T>, labels: &LabelMap) -> Result<Var<T>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "layout_ce expects [N, C, H, W] logits, got {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if labels.shape() != [n, h, w] {
        return Err(Error::Shape(format!(
            "labels {:?} do not match logits {s:?}",
            labels.shape()
        )));
    }
    labels.ensure_in_range(c)?;
    let plane = h * w;
    let count = (n * plane) as f64;

    let value = logits.with_value(|lv| {
        let data = lv.data();
        let mut loss = 0.0f64;
        for ni in 0..n {
            let base = ni * c * plane;
            for p in 0..plane {
                let mut mx = data[base + p].to_f64();
                for ci in 1..c {
                    mx = mx.max(data[base + ci * plane + p].to_f64());
                }
                let mut denom = 0.0f64;
                for ci in 0..c {
                    denom += (data[base + ci * plane + p].to_f64() - mx).exp();
                }
                let gt = labels.data()[ni * plane + p] as usize;
                let lse = mx + denom.ln();
                loss += lse - data[base + gt * plane + p].to_f64();
            }
        }
        Tensor::scalar(T::from_f64(loss / count))
    });

    let labels = labels.clone();
    Ok(logits.tape().record(&[logits], value, move || {
        Box::new(move |args| {
            // dlogits = (softmax - onehot) * g / count
            let y = kernels::softmax_channels_forward(args.inputs[0]).expect("validated");
            let g = args.grad_out.data()[0] / T::from_f64(count);
            let mut gx = y.data().to_vec();
            for ni in 0..n {
                for p in 0..plane {
                    let gt = labels.data()[ni * plane + p] as usize;
                    gx[(ni * c + gt) * plane + p] = gx[(ni * c + gt) * plane + p] - T::ONE;
                }
            }
            for v in &mut gx {
                *v = *v * g;
            }
            vec![Some(
                Tensor::from_vec(args.inputs[0].shape(), gx).expect("valid shape"),
            )]
        })
    }))
}

/// Weighted combination of already-evaluated generator terms.
///
/// Returns the scalar objective plus the unweighted per-term report
/// (`adv_d` is filled in by the caller).
pub fn total_generator_loss<T: Scalar>(
    l1: &Var<T>,
    feat: &Var<T>,
    adv_g: &Var<T>,
    layout: &Var<T>,
    weights: &LossWeights,
) -> Result<(Var<T>, LossReport)> {
    weights.validate()?;
    let total = ops::add(
        &ops::add(
            &ops::scale(l1, weights.w_l1),
            &ops::scale(feat, weights.w_feat),
        )?,
        &ops::add(
            &ops::scale(adv_g, weights.w_adv),
            &ops::scale(layout, weights.w_layout),
        )?,
    )?;
    let report = LossReport {
        total: total.value().data()[0].to_f64(),
        l1: l1.value().data()[0].to_f64(),
        feat: feat.value().data()[0].to_f64(),
        adv_g: adv_g.value().data()[0].to_f64(),
        adv_d: 0.0,
        layout_ce: layout.value().data()[0].to_f64(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, GradCheckConfig};

    #[test]
    fn l1_identity_and_offset() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::filled(&[1, 3, 2, 2], 0.5).unwrap());
        let same = tape.constant(Tensor::filled(&[1, 3, 2, 2], 0.5).unwrap());
        assert_eq!(l1_loss(&a, &same, None).unwrap().value().data()[0], 0.0);
        let off = tape.constant(Tensor::filled(&[1, 3, 2, 2], 0.0).unwrap());
        assert!((l1_loss(&a, &off, None).unwrap().value().data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn l1_masked_mean() {
        // offsets: 1.0 inside the mask, 0.0 outside -> masked mean 1.0
        let tape = Tape::<f64>::new();
        let mask = Tensor::from_vec(&[1, 1, 1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let target = tape.constant(Tensor::zeros(&[1, 2, 1, 4]).unwrap());
        let pred = tape.leaf(
            Tensor::from_vec(&[1, 2, 1, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap(),
        );
        let loss = l1_loss(&pred, &target, Some(&mask)).unwrap();
        assert!((loss.value().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l1_empty_mask_falls_back() {
        let tape = Tape::<f64>::new();
        let mask = Tensor::zeros(&[1, 1, 1, 4]).unwrap();
        let target = tape.constant(Tensor::zeros(&[1, 1, 1, 4]).unwrap());
        let pred = tape.leaf(Tensor::filled(&[1, 1, 1, 4], 2.0).unwrap());
        let loss = l1_loss(&pred, &target, Some(&mask)).unwrap();
        assert!((loss.value().data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn feature_loss_zero_on_identical_inputs() {
        let mut rng = Rng::new(1);
        let fx = FixedFeatureExtractor::<f64>::new(99).unwrap();
        let tape = Tape::new();
        let vars = fx.bind(&tape);
        let img = Tensor::rand_normal(&[1, 3, 8, 8], 0.0, 1.0, &mut rng).unwrap();
        let a = tape.leaf(img.clone());
        let b = tape.constant(img);
        let loss = feature_loss(&a, &b, &vars).unwrap();
        assert_eq!(loss.value().data()[0], 0.0);
    }

    #[test]
    fn feature_loss_nonnegative_and_deterministic() {
        let mut rng = Rng::new(2);
        let img1 = Tensor::<f64>::rand_normal(&[1, 3, 8, 8], 0.0, 1.0, &mut rng).unwrap();
        let img2 = Tensor::<f64>::rand_normal(&[1, 3, 8, 8], 0.0, 1.0, &mut rng).unwrap();
        let eval = || {
            let fx = FixedFeatureExtractor::<f64>::new(99).unwrap();
            let tape = Tape::no_grad();
            let vars = fx.bind(&tape);
            let a = tape.constant(img1.clone());
            let b = tape.constant(img2.clone());
            feature_loss(&a, &b, &vars).unwrap().value().data()[0]
        };
        let v1 = eval();
        let v2 = eval();
        assert!(v1 >= 0.0);
        assert_eq!(v1, v2);
    }

    #[test]
    fn hinge_margins() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::filled(&[1, 1, 2, 2], 1.0).unwrap());
        let neg_ones = tape.constant(Tensor::filled(&[1, 1, 2, 2], -1.0).unwrap());
        let zeros = tape.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());

        // margins satisfied -> loss_d = 0
        let (loss_d, _) = hinge_adv_losses(&ones, &neg_ones, &neg_ones).unwrap();
        assert_eq!(loss_d.value().data()[0], 0.0);

        // both scores zero -> loss_d = 2, loss_g = 0
        let (loss_d, loss_g) = hinge_adv_losses(&zeros, &zeros, &zeros).unwrap();
        assert_eq!(loss_d.value().data()[0], 2.0);
        assert_eq!(loss_g.value().data()[0], 0.0);
    }

    #[test]
    fn generator_loss_monotone_in_fake_score() {
        let tape = Tape::<f64>::new();
        let mut last = f64::INFINITY;
        for score in [-1.0, 0.0, 1.0, 2.0] {
            let d_fake = tape.constant(Tensor::filled(&[1, 1, 2, 2], score).unwrap());
            let (_, loss_g) = hinge_adv_losses(&d_fake, &d_fake, &d_fake).unwrap();
            let v = loss_g.value().data()[0];
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn ce_confident_and_uniform() {
        let tape = Tape::<f64>::new();
        // +1000 on the true class -> loss ~ 0
        let mut logits = Tensor::zeros(&[1, 3, 1, 2]).unwrap();
        logits.data_mut()[0] = 1000.0; // class 0, pixel 0
        logits.data_mut()[3] = 1000.0; // class 1, pixel 1
        let labels = LabelMap::new(&[1, 1, 2], vec![0, 1]).unwrap();
        let lv = tape.leaf(logits);
        let loss = layout_ce(&lv, &labels).unwrap();
        assert!(loss.value().data()[0].abs() < 1e-9);

        // uniform zero logits, C=3 -> ln 3
        let lv = tape.leaf(Tensor::zeros(&[1, 3, 2, 2]).unwrap());
        let labels = LabelMap::new(&[1, 2, 2], vec![0, 1, 2, 0]).unwrap();
        let loss = layout_ce(&lv, &labels).unwrap();
        assert!((loss.value().data()[0] - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_labels() {
        let tape = Tape::<f64>::new();
        let lv = tape.leaf(Tensor::zeros(&[1, 3, 1, 1]).unwrap());
        let labels = LabelMap::new(&[1, 1, 1], vec![3]).unwrap();
        assert!(matches!(layout_ce(&lv, &labels), Err(Error::Label(_))));
    }

    #[test]
    fn ce_gradcheck() {
        let mut rng = Rng::new(7);
        let logits = Tensor::<f64>::rand_normal(&[1, 4, 2, 3], 0.0, 1.0, &mut rng).unwrap();
        let labels =
            LabelMap::new(&[1, 2, 3], (0..6).map(|_| rng.below(4) as u8).collect()).unwrap();
        let report = gradcheck(
            "layout_ce",
            move |_, vars| layout_ce(&vars[0], &labels),
            &[logits],
            &GradCheckConfig {
                tol: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn ce_matches_softmax_route() {
        // -mean log softmax gathered at labels, via the nn softmax
        let mut rng = Rng::new(8);
        let logits = Tensor::<f64>::rand_normal(&[2, 3, 2, 2], 0.0, 2.0, &mut rng).unwrap();
        let labels =
            LabelMap::new(&[2, 2, 2], (0..8).map(|_| rng.below(3) as u8).collect()).unwrap();
        let tape = Tape::no_grad();
        let lv = tape.constant(logits.clone());
        let fused = layout_ce(&lv, &labels).unwrap().value().data()[0];

        let probs = kernels::softmax_channels_forward(&logits).unwrap();
        let plane = 4;
        let mut manual = 0.0;
        for ni in 0..2 {
            for p in 0..plane {
                let gt = labels.data()[ni * plane + p] as usize;
                manual -= probs.data()[(ni * 3 + gt) * plane + p].ln();
            }
        }
        manual /= 8.0;
        assert!((fused - manual).abs() < 1e-6);
    }

    #[test]
    fn total_loss_weighting() {
        let tape = Tape::<f64>::new();
        let l1 = tape.constant(Tensor::scalar(2.0));
        let feat = tape.constant(Tensor::scalar(3.0));
        let adv = tape.constant(Tensor::scalar(5.0));
        let ce = tape.constant(Tensor::scalar(7.0));

        // single-term selection
        let w = LossWeights {
            w_l1: 1.0,
            w_feat: 0.0,
            w_adv: 0.0,
            w_layout: 0.0,
        };
        let (total, report) = total_generator_loss(&l1, &feat, &adv, &ce, &w).unwrap();
        assert_eq!(total.value().data()[0], 2.0);
        assert_eq!(report.l1, 2.0);

        // doubling all weights doubles the total; report stays unweighted
        let w1 = LossWeights {
            w_l1: 1.0,
            w_feat: 0.5,
            w_adv: 0.25,
            w_layout: 2.0,
        };
        let w2 = LossWeights {
            w_l1: 2.0,
            w_feat: 1.0,
            w_adv: 0.5,
            w_layout: 4.0,
        };
        let (t1, r1) = total_generator_loss(&l1, &feat, &adv, &ce, &w1).unwrap();
        let (t2, r2) = total_generator_loss(&l1, &feat, &adv, &ce, &w2).unwrap();
        assert!((t2.value().data()[0] - 2.0 * t1.value().data()[0]).abs() < 1e-12);
        assert_eq!(r1.feat, r2.feat);
        assert_eq!(r1.layout_ce, r2.layout_ce);

        // all-zero weights rejected
        let w0 = LossWeights {
            w_l1: 0.0,
            w_feat: 0.0,
            w_adv: 0.0,
            w_layout: 0.0,
        };
        assert!(matches!(
            total_generator_loss(&l1, &feat, &adv, &ce, &w0),
            Err(Error::Config(_))
        ));
    }
}
