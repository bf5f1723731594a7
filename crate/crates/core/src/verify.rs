//! The registered gradient-check suite: every differentiable operation,
//! the composed blocks, and a two-stage micro-model, all verified against
//! central finite differences in f64.

use crate::autodiff::{gradcheck, ops, GradCheckConfig, GradCheckReport, Var};
use crate::error::Result;
use crate::layout::{gather_features, layout_head, LayoutTransformVars};
use crate::losses;
use crate::model;
use crate::nn::{self, Conv2dVars};
use crate::rng::Rng;
use crate::softsean::{self, SseanBlockVars, StyleEncoderVars};
use crate::tensor::{LabelMap, Tensor};

pub struct CheckSpec {
    pub name: &'static str,
    pub run: fn(&GradCheckConfig) -> Result<GradCheckReport>,
}

/// All named checks, in the order they are reported.
pub fn standard_checks() -> Vec<CheckSpec> {
    vec![
        CheckSpec { name: "sharpen", run: check_sharpen },
        CheckSpec { name: "region_pool", run: check_region_pool },
        CheckSpec { name: "soft_broadcast", run: check_soft_broadcast },
        CheckSpec { name: "style_encode", run: check_style_encode },
        CheckSpec { name: "ssean_block", run: check_ssean_block },
        CheckSpec { name: "layout_head", run: check_layout_head },
        CheckSpec { name: "conv2d", run: check_conv2d },
        CheckSpec { name: "instance_norm", run: check_instance_norm },
        CheckSpec { name: "softmax_channels", run: check_softmax_channels },
        CheckSpec { name: "upsample_nearest", run: check_upsample },
        CheckSpec { name: "resize_nearest", run: check_resize },
        CheckSpec { name: "avg_pool2", run: check_avg_pool },
        CheckSpec { name: "activations", run: check_activations },
        CheckSpec { name: "relu", run: check_relu },
        CheckSpec { name: "matmul", run: check_matmul },
        CheckSpec { name: "linear", run: check_linear },
        CheckSpec { name: "channel_linear", run: check_channel_linear },
        CheckSpec { name: "l1_loss", run: check_l1 },
        CheckSpec { name: "l1_loss_masked", run: check_l1_masked },
        CheckSpec { name: "feature_loss", run: check_feature_loss },
        CheckSpec { name: "hinge_adv", run: check_hinge },
        CheckSpec { name: "layout_ce", run: check_layout_ce },
        CheckSpec { name: "composite", run: check_composite },
        CheckSpec { name: "micro_model", run: check_micro_model },
    ]
}

/// Run checks, optionally restricted to one op name. Returns the reports
/// and whether every one passed.
pub fn run_all(
    cfg: &GradCheckConfig,
    filter: Option<&str>,
) -> Result<(Vec<GradCheckReport>, bool)> {
    let mut reports = Vec::new();
    let mut all_pass = true;
    for check in standard_checks() {
        if let Some(f) = filter {
            if check.name != f {
                continue;
            }
        }
        let report = (check.run)(cfg)?;
        all_pass &= report.pass;
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(crate::error::Error::Config(format!(
            "no registered op matches filter {:?}",
            filter.unwrap_or("")
        )));
    }
    Ok((reports, all_pass))
}

fn rng() -> Rng {
    Rng::new(0xC0FFEE)
}

fn random_probs(n: usize, c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor<f64> {
    let logits = Tensor::rand_normal(&[n, c, h, w], 0.0, 1.0, rng).unwrap();
    nn::kernels::softmax_channels_forward(&logits).unwrap()
}

/// Contract a tensor against a fixed ramp so the scalar sees every element
/// with a distinct weight.
fn weighted_sum(x: &Var<f64>) -> Result<Var<f64>> {
    let shape = x.shape();
    let w = x.tape().constant(Tensor::ramp(&shape)?.scale(0.1));
    Ok(ops::sum_all(&ops::mul(x, &w)?))
}

fn check_sharpen(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let m = random_probs(1, 3, 3, 4, &mut r);
    gradcheck(
        "sharpen",
        |_, vars| weighted_sum(&softsean::sharpen(&vars[0], 0.1)?),
        &[m],
        cfg,
    )
}

fn check_region_pool(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let styles = Tensor::rand_normal(&[1, 4, 3, 4], 0.0, 1.0, &mut r)?;
    let m = random_probs(1, 3, 3, 4, &mut r);
    gradcheck(
        "region_pool",
        |_, vars| weighted_sum(&softsean::region_pool(&vars[0], &vars[1], 1e-8)?),
        &[styles, m],
        cfg,
    )
}

fn check_soft_broadcast(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let st = Tensor::rand_normal(&[1, 3, 4], 0.0, 1.0, &mut r)?;
    let m = random_probs(1, 3, 3, 4, &mut r);
    gradcheck(
        "soft_broadcast",
        |_, vars| weighted_sum(&softsean::soft_broadcast(&vars[0], &vars[1])?),
        &[st, m],
        cfg,
    )
}

fn check_style_encode(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let enc = softsean::StyleEncoderParams::<f64>::init(4, 6, Some(0.1), &mut r)?;
    let image = Tensor::rand_normal(&[1, 3, 8, 8], 0.0, 0.5, &mut r)?;
    let m = random_probs(1, 3, 8, 8, &mut r);
    gradcheck(
        "style_encode",
        move |tape, vars| {
            let vars_enc: StyleEncoderVars<f64> = enc.bind(tape, false);
            weighted_sum(&vars_enc.encode(&vars[0], &vars[1])?)
        },
        &[image, m],
        cfg,
    )
}

fn check_ssean_block(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let params = softsean::SseanBlockParams::<f64>::init(4, 3, 4, Some(0.1), &mut r)?;
    let activation = Tensor::rand_normal(&[1, 4, 4, 8], 0.0, 1.0, &mut r)?;
    let st = Tensor::rand_normal(&[1, 3, 4], 0.0, 1.0, &mut r)?;
    let m = random_probs(1, 3, 4, 8, &mut r);
    gradcheck(
        "ssean_block",
        move |tape, vars| {
            let block: SseanBlockVars<f64> = params.bind(tape, false);
            weighted_sum(&softsean::ssean_block(&block, &vars[0], &vars[1], &vars[2])?)
        },
        &[activation, st, m],
        cfg,
    )
}

fn check_layout_head(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let x = Tensor::rand_normal(&[1, 5, 2, 4], 0.0, 1.0, &mut r)?;
    let t = Tensor::rand_normal(&[3, 5], 0.0, 1.0, &mut r)?;
    let bias = Tensor::rand_normal(&[3], 0.0, 0.5, &mut r)?;
    gradcheck(
        "layout_head",
        |_, vars| {
            let bank = gather_features(&[&vars[0]], 4, 8)?;
            let lt = LayoutTransformVars {
                t: vars[1].clone(),
                bias: vars[2].clone(),
                use_bias: true,
            };
            weighted_sum(&layout_head(&bank, &lt)?.probs)
        },
        &[x, t, bias],
        cfg,
    )
}

fn check_conv2d(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let x = Tensor::rand_normal(&[1, 2, 4, 4], 0.0, 1.0, &mut r)?;
    let w = Tensor::rand_normal(&[3, 2, 3, 3], 0.0, 0.5, &mut r)?;
    let b = Tensor::rand_normal(&[3], 0.0, 0.5, &mut r)?;
    gradcheck(
        "conv2d",
        |_, vars| weighted_sum(&nn::conv2d(&vars[0], &vars[1], &vars[2], 1, 1)?),
        &[x, w, b],
        cfg,
    )
}

fn check_instance_norm(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let x = Tensor::rand_normal(&[1, 2, 3, 3], 0.0, 1.0, &mut r)?;
    gradcheck(
        "instance_norm",
        |_, vars| weighted_sum(&nn::instance_norm(&vars[0], 1e-5)?),
        &[x],
        cfg,
    )
}

fn check_softmax_channels(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let x = Tensor::rand_normal(&[1, 4, 2, 3], 0.0, 2.0, &mut r)?;
    gradcheck(
        "softmax_channels",
        |_, vars| weighted_sum(&nn::softmax_channels(&vars[0])?),
        &[x],
        cfg,
    )
}

fn check_upsample(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let x = Tensor::rand_normal(&[1, 2, 2, 3], 0.0, 1.0, &mut r)?;
    gradcheck(
        "upsample_nearest",
        |_, vars| weighted_sum(&nn::upsample_nearest(&vars[0], 2)?),
        &[x],
        cfg,
    )
}

fn check_resize(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let x = Tensor::rand_normal(&[1, 2, 4, 6], 0.0, 1.0, &mut r)?;
    gradcheck(
        "resize_nearest",
        |_, vars| {
            let up = nn::resize_nearest(&vars[0], 8, 12)?;
            let down = nn::resize_nearest(&up, 2, 3)?;
            weighted_sum(&down)
        },
        &[x],
        cfg,
    )
}

fn check_avg_pool(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let x = Tensor::rand_normal(&[1, 2, 4, 4], 0.0, 1.0, &mut r)?;
    gradcheck(
        "avg_pool2",
        |_, vars| weighted_sum(&nn::avg_pool2(&vars[0])?),
        &[x],
        cfg,
    )
}

fn check_activations(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let x = Tensor::rand_normal(&[12], 0.0, 1.0, &mut r)?;
    gradcheck(
        "activations",
        |_, vars| {
            let t = nn::tanh(&vars[0]);
            let s = nn::sigmoid(&vars[0]);
            let l = nn::leaky_relu(&vars[0], 0.2);
            weighted_sum(&ops::add(&ops::add(&t, &s)?, &l)?)
        },
        &[x],
        cfg,
    )
}

fn check_relu(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let x = Tensor::rand_normal(&[16], 0.0, 1.0, &mut r)?;
    gradcheck("relu", |_, vars| weighted_sum(&nn::relu(&vars[0])), &[x], cfg)
}

fn check_matmul(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let a = Tensor::rand_normal(&[3, 4], 0.0, 1.0, &mut r)?;
    let b = Tensor::rand_normal(&[4, 5], 0.0, 1.0, &mut r)?;
    gradcheck(
        "matmul",
        |_, vars| weighted_sum(&ops::matmul(&vars[0], &vars[1])?),
        &[a, b],
        cfg,
    )
}

fn check_linear(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let x = Tensor::rand_normal(&[4, 3], 0.0, 1.0, &mut r)?;
    let w = Tensor::rand_normal(&[5, 3], 0.0, 1.0, &mut r)?;
    let b = Tensor::rand_normal(&[5], 0.0, 1.0, &mut r)?;
    gradcheck(
        "linear",
        |_, vars| weighted_sum(&ops::linear(&vars[0], &vars[1], &vars[2])?),
        &[x, w, b],
        cfg,
    )
}

fn check_channel_linear(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let x = Tensor::rand_normal(&[2, 3, 2, 3], 0.0, 1.0, &mut r)?;
    let w = Tensor::rand_normal(&[4, 3], 0.0, 1.0, &mut r)?;
    let b = Tensor::rand_normal(&[4], 0.0, 1.0, &mut r)?;
    gradcheck(
        "channel_linear",
        |_, vars| weighted_sum(&ops::channel_linear(&vars[0], &vars[1], Some(&vars[2]))?),
        &[x, w, b],
        cfg,
    )
}

fn check_l1(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let pred = Tensor::rand_normal(&[1, 3, 3, 3], 0.0, 1.0, &mut r)?;
    let target = Tensor::rand_normal(&[1, 3, 3, 3], 0.0, 1.0, &mut r)?;
    gradcheck(
        "l1_loss",
        move |tape, vars| losses::l1_loss(&vars[0], &tape.constant(target.clone()), None),
        &[pred],
        cfg,
    )
}

fn check_l1_masked(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let pred = Tensor::rand_normal(&[1, 3, 2, 4], 0.0, 1.0, &mut r)?;
    let target = Tensor::rand_normal(&[1, 3, 2, 4], 0.0, 1.0, &mut r)?;
    let mask = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0])?;
    gradcheck(
        "l1_loss_masked",
        move |tape, vars| {
            losses::l1_loss(&vars[0], &tape.constant(target.clone()), Some(&mask))
        },
        &[pred],
        cfg,
    )
}

fn check_feature_loss(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let fx = losses::FixedFeatureExtractor::<f64>::new(7)?;
    let pred = Tensor::rand_normal(&[1, 3, 8, 8], 0.0, 0.5, &mut r)?;
    let target = Tensor::rand_normal(&[1, 3, 8, 8], 0.0, 0.5, &mut r)?;
    gradcheck(
        "feature_loss",
        move |tape, vars| {
            let fxv = fx.bind(tape);
            losses::feature_loss(&vars[0], &tape.constant(target.clone()), &fxv)
        },
        &[pred],
        cfg,
    )
}

fn check_hinge(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let d_real = Tensor::rand_normal(&[1, 1, 2, 3], 0.5, 0.3, &mut r)?;
    let d_fake = Tensor::rand_normal(&[1, 1, 2, 3], -0.5, 0.3, &mut r)?;
    gradcheck(
        "hinge_adv",
        |_, vars| {
            let (loss_d, loss_g) = losses::hinge_adv_losses(&vars[0], &vars[1], &vars[1])?;
            ops::add(&loss_d, &loss_g)
        },
        &[d_real, d_fake],
        cfg,
    )
}

fn check_layout_ce(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let logits = Tensor::rand_normal(&[1, 4, 2, 3], 0.0, 1.0, &mut r)?;
    let labels = LabelMap::new(&[1, 2, 3], (0..6).map(|_| r.below(4) as u8).collect())?;
    gradcheck(
        "layout_ce",
        move |_, vars| losses::layout_ce(&vars[0], &labels),
        &[logits],
        cfg,
    )
}

fn check_composite(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let generated = Tensor::rand_normal(&[1, 3, 2, 4], 0.0, 0.5, &mut r)?;
    let known = Tensor::rand_normal(&[1, 3, 2, 4], 0.0, 0.5, &mut r)?;
    let mask = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0])?;
    gradcheck(
        "composite",
        move |_, vars| weighted_sum(&model::composite(&known, &vars[0], &mask)?),
        &[generated],
        cfg,
    )
}

/// Two-stage miniature of the whole pipeline: a coarse stage producing an
/// image and a layout map from decoder features, the composite, a style
/// encoder, one modulated refine block, and the supervision terms.
/// Checked with respect to the input image and one parameter tensor per
/// subsystem.
fn check_micro_model(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng();
    let (h, w) = (8usize, 16usize);
    let i_f = Tensor::rand_normal(&[1, 3, h, w], 0.0, 0.5, &mut r)?;
    let enc_w = Tensor::rand_normal(&[4, 3, 3, 3], 0.0, 0.3, &mut r)?;
    let layout_t = Tensor::rand_normal(&[3, 8], 0.0, 0.5, &mut r)?;
    let gamma_w = Tensor::rand_normal(&[4, 7, 3, 3], 0.0, 0.1, &mut r)?;
    let proj_w = Tensor::rand_normal(&[4, 4, 1, 1], 0.0, 0.5, &mut r)?;

    // frozen context
    let enc_b = Tensor::rand_normal(&[4], 0.0, 0.1, &mut r)?;
    let dec_w = Tensor::rand_normal(&[4, 4, 3, 3], 0.0, 0.3, &mut r)?;
    let dec_b = Tensor::zeros(&[4])?;
    let rgb_w = Tensor::rand_normal(&[3, 4, 3, 3], 0.0, 0.3, &mut r)?;
    let rgb_b = Tensor::zeros(&[3])?;
    let style_w = Tensor::rand_normal(&[4, 3, 3, 3], 0.0, 0.3, &mut r)?;
    let style_b = Tensor::zeros(&[4])?;
    let act_w = Tensor::rand_normal(&[4, 3, 3, 3], 0.0, 0.3, &mut r)?;
    let act_b = Tensor::zeros(&[4])?;
    let beta_w = Tensor::rand_normal(&[4, 7, 3, 3], 0.0, 0.1, &mut r)?;
    let gb_bias = Tensor::zeros(&[4])?;
    let proj_b = Tensor::zeros(&[4])?;
    let out_w = Tensor::rand_normal(&[3, 4, 3, 3], 0.0, 0.3, &mut r)?;
    let layout_bias = Tensor::rand_normal(&[3], 0.0, 0.2, &mut r)?;
    let mask = {
        let mut m = Tensor::zeros(&[1, 1, h, w])?;
        for y in 2..6 {
            for x in 4..12 {
                m.data_mut()[y * w + x] = 1.0;
            }
        }
        m
    };
    let target = Tensor::rand_normal(&[1, 3, h, w], 0.0, 0.4, &mut r)?;
    let labels = LabelMap::new(&[1, h, w], (0..h * w).map(|i| ((i / w) / 3) as u8 % 3).collect())?;

    gradcheck(
        "micro_model",
        move |tape, vars| {
            let conv = |x: &Var<f64>, wv: &Var<f64>, bt: &Tensor<f64>, stride: usize| {
                nn::conv2d(x, wv, &tape.constant(bt.clone()), stride, 1)
            };
            let cw = |t: &Tensor<f64>| tape.constant(t.clone());

            // coarse stage at half resolution
            let x = nn::avg_pool2(&vars[0])?;
            let e1 = nn::leaky_relu(&conv(&x, &vars[1], &enc_b, 2)?, 0.2); // 2x4
            let d1 = nn::leaky_relu(
                &conv(&nn::upsample_nearest(&e1, 2)?, &cw(&dec_w), &dec_b, 1)?,
                0.2,
            ); // 4x8
            let i_c = nn::upsample_nearest(
                &nn::tanh(&nn::conv2d(
                    &d1,
                    &cw(&rgb_w),
                    &tape.constant(rgb_b.clone()),
                    1,
                    1,
                )?),
                2,
            )?;

            // layout from decoder features (two maps at 4x8)
            let bank = gather_features(&[&d1, &e1], h, w)?;
            let lt = LayoutTransformVars {
                t: vars[2].clone(),
                bias: tape.constant(layout_bias.clone()),
                use_bias: true,
            };
            let head = layout_head(&bank, &lt)?;

            // composite
            let comp = model::composite_vars(&vars[0], &i_c, &mask)?;

            // style codes from the masked input under the predicted map
            let sf = nn::leaky_relu(&conv(&vars[0], &cw(&style_w), &style_b, 2)?, 0.2); // 4x8
            let m_small = nn::resize_nearest(&head.probs, 4, 8)?;
            let m_sharp = softsean::sharpen(&m_small, 0.1)?;
            let st = softsean::region_pool(&sf, &m_sharp, 1e-8)?;

            // one modulated refine block
            let act = nn::leaky_relu(&conv(&comp, &cw(&act_w), &act_b, 2)?, 0.2); // 4x8
            let block = SseanBlockVars {
                style_projection: Conv2dVars {
                    weight: vars[4].clone(),
                    bias: tape.constant(proj_b.clone()),
                    stride: 1,
                    padding: 0,
                },
                gamma_conv: Conv2dVars {
                    weight: vars[3].clone(),
                    bias: tape.constant(gb_bias.clone()),
                    stride: 1,
                    padding: 1,
                },
                beta_conv: Conv2dVars {
                    weight: tape.constant(beta_w.clone()),
                    bias: tape.constant(gb_bias.clone()),
                    stride: 1,
                    padding: 1,
                },
                k_sharpen: Some(0.1),
                norm_eps: 1e-5,
            };
            let modulated = softsean::ssean_block(&block, &act, &st, &head.probs)?;
            let refined_raw = nn::tanh(&nn::conv2d(
                &nn::upsample_nearest(&modulated, 2)?,
                &cw(&out_w),
                &tape.constant(rgb_b.clone()),
                1,
                1,
            )?);
            let refined = model::composite_vars(&vars[0], &refined_raw, &mask)?;

            // supervision
            let l1 = losses::l1_loss(&refined, &tape.constant(target.clone()), Some(&mask))?;
            let ce = losses::layout_ce(&head.logits, &labels)?;
            ops::add(&l1, &ce)
        },
        &[i_f, enc_w, layout_t, gamma_w, proj_w],
        cfg,
    )
}
