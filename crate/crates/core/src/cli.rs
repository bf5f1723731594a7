//! Command implementations behind the binary: gradient verification, data
//! generation, training, evaluation, and single-image inference.
//!
//! Configuration precedence is defaults, then a `key=value` config file,
//! then command-line flags. All randomness comes from the resolved seed.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::autodiff::GradCheckConfig;
use crate::data_synth::{generate_dataset, read_dataset, write_dataset, SceneConfig, SceneSample};
use crate::error::{Error, Result};
use crate::io::pnm::{read_pgm, read_ppm, rgb_to_tensor, tensor_to_rgb, write_ppm};
use crate::layout::export_layout_pgm;
use crate::losses::LossWeights;
use crate::model::{mask_input, FullModel, ModelMeta};
use crate::par;
use crate::softsean::SemanticMap;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{evaluate, train, Metrics, TrainOptions};
use crate::verify;

/// Resolved run configuration shared by every subcommand.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub style_dim: usize,
    pub k_sharpen: f64,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub adv_warmup_epochs: usize,
    /// 0 means auto-detect; 1 is single-threaded mode.
    pub threads: usize,
    pub use_f64: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            height: 32,
            width: 64,
            classes: 3,
            style_dim: 16,
            k_sharpen: 0.1,
            seed: 0,
            epochs: 30,
            lr: 2e-4,
            weights: LossWeights::default(),
            batch_size: 4,
            adv_warmup_epochs: 5,
            threads: 0,
            use_f64: false,
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "resolved config:")?;
        writeln!(f, "  res={}x{} classes={}", self.height, self.width, self.classes)?;
        writeln!(
            f,
            "  style_dim={} k_sharpen={} seed={}",
            self.style_dim, self.k_sharpen, self.seed
        )?;
        writeln!(
            f,
            "  epochs={} lr={} batch_size={} warmup={}",
            self.epochs, self.lr, self.batch_size, self.adv_warmup_epochs
        )?;
        writeln!(
            f,
            "  weights={},{},{},{}",
            self.weights.w_l1, self.weights.w_feat, self.weights.w_adv, self.weights.w_layout
        )?;
        write!(
            f,
            "  threads={} dtype={}",
            if self.threads == 0 {
                "auto".to_string()
            } else {
                self.threads.to_string()
            },
            if self.use_f64 { "f64" } else { "f32" }
        )
    }
}

/// Optional overrides collected from command-line flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub res: Option<(usize, usize)>,
    pub style_dim: Option<usize>,
    pub k_sharpen: Option<f64>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub weights: Option<LossWeights>,
    pub batch_size: Option<usize>,
    pub adv_warmup_epochs: Option<usize>,
    pub threads: Option<usize>,
    pub use_f64: bool,
}

pub fn parse_res(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("--res expects HxW, got {s:?}")))?;
    let parse = |v: &str, what: &str| -> Result<usize> {
        v.trim()
            .parse()
            .map_err(|_| Error::Config(format!("--res: bad {what} in {s:?}")))
    };
    Ok((parse(h, "height")?, parse(w, "width")?))
}

pub fn parse_weights(s: &str) -> Result<LossWeights> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!(
            "--weights expects l1,feat,adv,layout (4 values), got {s:?}"
        )));
    }
    let parse = |v: &str| -> Result<f64> {
        v.trim()
            .parse()
            .map_err(|_| Error::Config(format!("--weights: bad value {v:?}")))
    };
    let w = LossWeights {
        w_l1: parse(parts[0])?,
        w_feat: parse(parts[1])?,
        w_adv: parse(parts[2])?,
        w_layout: parse(parts[3])?,
    };
    w.validate()?;
    Ok(w)
}

fn apply_config_line(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("config file: bad {what} value {value:?}"));
    match key {
        "res" => {
            let (h, w) = parse_res(value)?;
            cfg.height = h;
            cfg.width = w;
        }
        "style_dim" => cfg.style_dim = value.parse().map_err(|_| bad("style_dim"))?,
        "k_sharpen" => cfg.k_sharpen = value.parse().map_err(|_| bad("k_sharpen"))?,
        "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
        "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
        "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
        "weights" => cfg.weights = parse_weights(value)?,
        "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
        "warmup" => cfg.adv_warmup_epochs = value.parse().map_err(|_| bad("warmup"))?,
        "threads" => cfg.threads = value.parse().map_err(|_| bad("threads"))?,
        "f64" => cfg.use_f64 = value.parse().map_err(|_| bad("f64"))?,
        other => {
            return Err(Error::Config(format!("config file: unknown key {other:?}")));
        }
    }
    Ok(())
}

/// Build the effective configuration: defaults, then the config file, then
/// explicit flag overrides.
pub fn resolve_config(config_file: Option<&Path>, flags: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config_file {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config file: expected key=value, got {line:?}")))?;
            apply_config_line(&mut cfg, key.trim(), value.trim())?;
        }
    }
    if let Some((h, w)) = flags.res {
        cfg.height = h;
        cfg.width = w;
    }
    if let Some(v) = flags.style_dim {
        cfg.style_dim = v;
    }
    if let Some(v) = flags.k_sharpen {
        cfg.k_sharpen = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.weights {
        cfg.weights = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.adv_warmup_epochs {
        cfg.adv_warmup_epochs = v;
    }
    if let Some(v) = flags.threads {
        cfg.threads = v;
    }
    if flags.use_f64 {
        cfg.use_f64 = true;
    }
    if cfg.k_sharpen <= 0.0 {
        return Err(Error::Config(format!(
            "--k-sharpen must be positive, got {}",
            cfg.k_sharpen
        )));
    }
    cfg.weights.validate()?;
    if cfg.threads > 0 {
        par::set_threads(cfg.threads);
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn model_meta(&self) -> ModelMeta {
        ModelMeta {
            height: self.height,
            width: self.width,
            classes: self.classes,
            style_dim: self.style_dim,
            k_sharpen: self.k_sharpen,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig::desk(self.height, self.width, self.seed)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            lr: self.lr,
            weights: self.weights,
            adv_warmup_epochs: self.adv_warmup_epochs,
        }
    }
}

/// Run the registered gradient checks, print the table, and report whether
/// every op passed. Always runs in f64.
pub fn cmd_gradcheck(tol: f64, eps: f64, op: Option<&str>) -> Result<bool> {
    let cfg = GradCheckConfig {
        eps,
        tol,
        skip_kinks: true,
    };
    let (reports, all_pass) = verify::run_all(&cfg, op)?;
    println!("{}", crate::autodiff::GradCheckReport::table_header());
    for r in &reports {
        println!("{}", r.table_row());
    }
    if !all_pass {
        let failing: Vec<&str> = reports
            .iter()
            .filter(|r| !r.pass)
            .map(|r| r.name.as_str())
            .collect();
        eprintln!("gradcheck failed for: {}", failing.join(", "));
    }
    Ok(all_pass)
}

pub fn cmd_gen_data<T: Scalar>(cfg: &RunConfig, n: usize, out: &Path) -> Result<()> {
    let scene_cfg = cfg.scene_config();
    let samples: Vec<SceneSample<T>> = generate_dataset(&scene_cfg, n)?;
    write_dataset(&samples, &scene_cfg, out)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn load_or_generate<T: Scalar>(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    n_fallback: usize,
) -> Result<Vec<SceneSample<T>>> {
    match dataset {
        Some(dir) => read_dataset(dir),
        None => generate_dataset(&cfg.scene_config(), n_fallback),
    }
}

/// Train and write `model.ckpt` plus `train_log.csv` under `out`.
pub fn cmd_train<T: Scalar>(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    n_fallback: usize,
    out: &Path,
) -> Result<()> {
    let data: Vec<SceneSample<T>> = load_or_generate(cfg, dataset, n_fallback)?;
    let mut model = FullModel::<T>::init(cfg.model_meta(), cfg.seed)?;
    let log = train(&mut model, &data, &cfg.train_options())?;
    fs::create_dir_all(out)?;
    model.save(out.join("model.ckpt"))?;
    fs::write(out.join("train_log.csv"), &log.csv)?;
    println!(
        "trained {} steps; final total loss {:.6}",
        log.steps, log.last_report.total
    );
    println!("checkpoint: {}", out.join("model.ckpt").display());
    Ok(())
}

/// Evaluate a checkpoint on a dataset directory and print the metrics.
pub fn cmd_eval<T: Scalar>(
    ckpt: &Path,
    dataset: &Path,
    metrics_out: Option<&Path>,
) -> Result<Metrics> {
    let model = FullModel::<T>::load(ckpt)?;
    let data: Vec<SceneSample<T>> = read_dataset(dataset)?;
    let metrics = evaluate(&model, &data)?;
    println!("{}", metrics.table());
    if let Some(path) = metrics_out {
        fs::write(
            path,
            format!("{}\n{}\n", Metrics::csv_header(), metrics.csv_line()),
        )?;
    }
    Ok(metrics)
}

/// Run the pipeline on one furnished image + mask and dump
/// `coarse.ppm`, `composite.ppm`, `refined.ppm`, `layout.pgm`.
pub fn cmd_infer<T: Scalar>(
    ckpt: &Path,
    image_path: &Path,
    mask_path: &Path,
    out: &Path,
) -> Result<()> {
    let model = FullModel::<T>::load(ckpt)?;
    let img = rgb_to_tensor::<T>(&read_ppm(image_path)?)?;
    let mask_img = read_pgm(mask_path)?;
    let s = img.shape().to_vec();
    if mask_img.height != s[1] || mask_img.width != s[2] {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask_img.height, mask_img.width, s[1], s[2]
        )));
    }
    if s[1] != model.meta.height || s[2] != model.meta.width {
        return Err(Error::Shape(format!(
            "image {}x{} does not match checkpoint resolution {}x{}",
            s[1], s[2], model.meta.height, model.meta.width
        )));
    }
    let mask = Tensor::from_vec(
        &[1, 1, s[1], s[2]],
        mask_img
            .pixels
            .iter()
            .map(|&b| if b > 127 { T::ONE } else { T::ZERO })
            .collect(),
    )?;
    let full = img.reshaped(&[1, 3, s[1], s[2]])?;
    let i_f = mask_input(&full, &mask)?;

    let tape = crate::autodiff::Tape::no_grad();
    let gen = model.bind_generator(&tape, false);
    let out_pipe = model.generator_forward(&gen, &i_f, &mask, &tape)?;

    fs::create_dir_all(out)?;
    let dump = |t: &Tensor<T>, name: &str| -> Result<()> {
        let img3 = t.reshaped(&[3, s[1], s[2]])?;
        write_ppm(out.join(name), &tensor_to_rgb(&img3)?)
    };
    dump(&out_pipe.i_c.value(), "coarse.ppm")?;
    dump(&out_pipe.comp.value(), "composite.ppm")?;
    dump(&out_pipe.refined.value(), "refined.ppm")?;
    let labels = SemanticMap::new(out_pipe.m_probs.value())?.argmax_labels();
    export_layout_pgm(&labels, out.join("layout.pgm"))?;
    println!(
        "wrote coarse.ppm, composite.ppm, refined.ppm, layout.pgm to {}",
        out.display()
    );
    Ok(())
}

/// Exit code for an error: bad inputs and configuration are usage errors
/// (2); numeric and runtime failures are 3.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::Graph(_) | Error::Contract(_) | Error::Generation(_) => 3,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn res_and_weights_parsing() {
        assert_eq!(parse_res("32x64").unwrap(), (32, 64));
        assert_eq!(parse_res("128X256").unwrap(), (128, 256));
        assert!(parse_res("32").is_err());
        assert!(parse_res("axb").is_err());

        let w = parse_weights("1,0.1,0.01,1").unwrap();
        assert_eq!(w.w_feat, 0.1);
        assert!(parse_weights("1,2,3").is_err());
        assert!(parse_weights("0,0,0,0").is_err());
    }

    #[test]
    fn config_precedence() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nseed=5\nepochs=3\nres=16x32\n").unwrap();
        let flags = Overrides {
            epochs: Some(9),
            ..Default::default()
        };
        let cfg = resolve_config(Some(&path), &flags).unwrap();
        assert_eq!(cfg.seed, 5); // from file
        assert_eq!(cfg.epochs, 9); // flag wins
        assert_eq!(cfg.height, 16);
        assert_eq!(cfg.batch_size, 4); // default
    }

    #[test]
    fn unknown_config_key_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "bogus=1\n").unwrap();
        assert!(matches!(
            resolve_config(Some(&path), &Overrides::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_k_sharpen_rejected() {
        let flags = Overrides {
            k_sharpen: Some(0.0),
            ..Default::default()
        };
        assert!(matches!(
            resolve_config(None, &flags),
            Err(Error::Config(_))
        ));
    }
}
