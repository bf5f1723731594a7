//! Procedural paired scenes: a textured three-band room (ceiling / wall /
//! floor with jittered boundaries) as the empty ground truth, rectangular
//! furniture occluders drawn over it as the furnished image, the occluder
//! union as the foreground mask, and band membership as the layout labels.
//!
//! Pixels are generated directly on the 8-bit grid, so in-memory tensors
//! and PPM/PGM files round-trip exactly, and the furnished image is
//! bit-equal to the empty one outside the mask.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::pnm::{
    dequantize, quantize, read_pgm, read_ppm, rgb_to_tensor, tensor_to_rgb, write_pgm, write_ppm,
    GrayImage,
};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Scalar, Tensor};

pub const CLASSES: usize = 3;

/// Per-class texture: base color in `(-1, 1)` RGB plus Gaussian noise
/// amplitude.
#[derive(Debug, Clone, Copy)]
pub struct ClassTexture {
    pub base: [f64; 3],
    pub noise_amp: f64,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub n_furniture_min: usize,
    pub n_furniture_max: usize,
    /// Boundary waviness as a fraction of image height.
    pub band_jitter: f64,
    /// Textures for ceiling, wall, floor (top to bottom).
    pub textures: [ClassTexture; CLASSES],
    pub seed: u64,
}

impl SceneConfig {
    pub fn desk(height: usize, width: usize, seed: u64) -> Self {
        SceneConfig {
            height,
            width,
            n_furniture_min: 1,
            n_furniture_max: 3,
            band_jitter: 0.05,
            textures: [
                ClassTexture {
                    base: [0.55, 0.60, 0.72],
                    noise_amp: 0.05,
                },
                ClassTexture {
                    base: [0.10, 0.42, 0.38],
                    noise_amp: 0.07,
                },
                ClassTexture {
                    base: [-0.15, -0.45, -0.70],
                    noise_amp: 0.07,
                },
            ],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 32 {
            return Err(Error::Config(format!(
                "scene must be at least 16x32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.width != 2 * self.height {
            return Err(Error::Config(format!(
                "panoramic aspect requires width = 2 * height, got {}x{}",
                self.height, self.width
            )));
        }
        if self.n_furniture_max < self.n_furniture_min {
            return Err(Error::Config("furniture range is empty".into()));
        }
        if !(0.0..0.3).contains(&self.band_jitter) {
            return Err(Error::Config(format!(
                "band jitter {} outside [0, 0.3)",
                self.band_jitter
            )));
        }
        Ok(())
    }
}

/// One paired training example.
#[derive(Debug, Clone)]
pub struct SceneSample<T: Scalar> {
    /// Furnished image, `[3, H, W]`, range `(-1, 1)`.
    pub full: Tensor<T>,
    /// Background ground truth, `[3, H, W]`.
    pub empty: Tensor<T>,
    /// Foreground mask, `[1, H, W]`, values exactly 0 or 1.
    pub fg_mask: Tensor<T>,
    /// Band membership per pixel, `[H, W]`, values 0 / 1 / 2.
    pub gt_layout: LabelMap,
}

impl<T: Scalar> SceneSample<T> {
    pub fn mask_fraction(&self) -> f64 {
        self.fg_mask.sum().to_f64() / self.fg_mask.numel() as f64
    }
}

const MIN_MASK_FRACTION: f64 = 0.05;
const MAX_MASK_FRACTION: f64 = 0.40;
const MIN_CLASS_FRACTION: f64 = 0.10;
const MAX_CLASS_FRACTION: f64 = 0.80;
const MAX_ATTEMPTS: usize = 100;

/// Generate the `index`-th sample of a dataset (seed substream `seed ^ index`).
pub fn generate_scene<T: Scalar>(cfg: &SceneConfig, index: u64) -> Result<SceneSample<T>> {
    cfg.validate()?;
    let mut rng = Rng::derive(cfg.seed, index);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(sample) = try_generate(cfg, &mut rng)? {
            return Ok(sample);
        }
    }
    Err(Error::Generation(format!(
        "could not satisfy coverage invariants after {MAX_ATTEMPTS} attempts (sample {index})"
    )))
}

fn try_generate<T: Scalar>(cfg: &SceneConfig, rng: &mut Rng) -> Result<Option<SceneSample<T>>> {
    let (h, w) = (cfg.height, cfg.width);
    let hf = h as f64;

    // wavy band boundaries
    let amp = cfg.band_jitter * hf;
    let b1_base = hf / 3.0 + rng.uniform(-0.06, 0.06) * hf;
    let b2_base = 2.0 * hf / 3.0 + rng.uniform(-0.06, 0.06) * hf;
    let (f1a, f1b) = (
        rng.range_inclusive(1, 2) as f64,
        rng.range_inclusive(2, 4) as f64,
    );
    let (f2a, f2b) = (
        rng.range_inclusive(1, 2) as f64,
        rng.range_inclusive(2, 4) as f64,
    );
    let (p1a, p1b) = (
        rng.uniform(0.0, std::f64::consts::TAU),
        rng.uniform(0.0, std::f64::consts::TAU),
    );
    let (p2a, p2b) = (
        rng.uniform(0.0, std::f64::consts::TAU),
        rng.uniform(0.0, std::f64::consts::TAU),
    );
    let min_row = (MIN_CLASS_FRACTION * hf).ceil() as usize;
    let gap = min_row.max(1);

    let mut b1 = vec![0usize; w];
    let mut b2 = vec![0usize; w];
    for x in 0..w {
        let t = x as f64 / w as f64 * std::f64::consts::TAU;
        let off1 = amp * (0.7 * (f1a * t + p1a).sin() + 0.3 * (f1b * t + p1b).sin());
        let off2 = amp * (0.7 * (f2a * t + p2a).sin() + 0.3 * (f2b * t + p2b).sin());
        let r1 =
            ((b1_base + off1).round() as isize).clamp(min_row as isize, (h - 2 * gap) as isize);
        let r2 = ((b2_base + off2).round() as isize).clamp(r1 + gap as isize, (h - gap) as isize);
        b1[x] = r1 as usize;
        b2[x] = r2 as usize;
    }

    let mut layout = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            layout[y * w + x] = if y < b1[x] {
                0
            } else if y < b2[x] {
                1
            } else {
                2
            };
        }
    }

    // class coverage
    let mut counts = [0usize; CLASSES];
    for &l in &layout {
        counts[l as usize] += 1;
    }
    let total = (h * w) as f64;
    for &c in &counts {
        let frac = c as f64 / total;
        if !(MIN_CLASS_FRACTION..=MAX_CLASS_FRACTION).contains(&frac) {
            return Ok(None);
        }
    }

    // textured empty room, quantized at generation time
    let mut shifts = [[0.0f64; 3]; CLASSES];
    for s in shifts.iter_mut() {
        for ch in s.iter_mut() {
            *ch = rng.uniform(-0.08, 0.08);
        }
    }
    let mut empty_px = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let class = layout[y * w + x] as usize;
            let tex = &cfg.textures[class];
            for ch in 0..3 {
                let v = tex.base[ch] + shifts[class][ch] + tex.noise_amp * rng.next_normal();
                empty_px[(y * w + x) * 3 + ch] = quantize(v.clamp(-1.0, 1.0));
            }
        }
    }

    // furniture rectangles over the furnished copy
    let mut full_px = empty_px.clone();
    let mut mask = vec![0u8; h * w];
    let n_furniture = rng.range_inclusive(cfg.n_furniture_min, cfg.n_furniture_max);
    for _ in 0..n_furniture {
        let rw = ((rng.uniform(0.12, 0.35) * w as f64) as usize).clamp(2, w - 1);
        let rh = ((rng.uniform(0.20, 0.50) * hf) as usize).clamp(2, h - 1);
        let x0 = rng.below(w - rw);
        let y0 = rng.below(h - rh);
        let color: [u8; 3] = [
            quantize(rng.uniform(-1.0, 1.0)),
            quantize(rng.uniform(-1.0, 1.0)),
            quantize(rng.uniform(-1.0, 1.0)),
        ];
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                mask[y * w + x] = 1;
                for ch in 0..3 {
                    full_px[(y * w + x) * 3 + ch] = color[ch];
                }
            }
        }
    }

    let coverage = mask.iter().filter(|&&m| m == 1).count() as f64 / total;
    if !(MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&coverage) {
        return Ok(None);
    }

    let to_tensor = |px: &[u8]| -> Result<Tensor<T>> {
        rgb_to_tensor(&crate::io::pnm::RgbImage {
            width: w,
            height: h,
            pixels: px.to_vec(),
        })
    };
    let mask_tensor = Tensor::from_vec(
        &[1, h, w],
        mask.iter()
            .map(|&m| if m == 1 { T::ONE } else { T::ZERO })
            .collect(),
    )?;

    Ok(Some(SceneSample {
        full: to_tensor(&full_px)?,
        empty: to_tensor(&empty_px)?,
        fg_mask: mask_tensor,
        gt_layout: LabelMap::new(&[h, w], layout)?,
    }))
}

/// Generate `n` samples with per-sample derived seeds.
pub fn generate_dataset<T: Scalar>(cfg: &SceneConfig, n: usize) -> Result<Vec<SceneSample<T>>> {
    (0..n).map(|i| generate_scene(cfg, i as u64)).collect()
}

const LAYOUT_SCALE: u8 = 100;

/// Write one subdirectory per sample: `full.ppm`, `empty.ppm`, `mask.pgm`,
/// `layout.pgm` (class id x 100), `meta` (`key=value` lines).
pub fn write_dataset<T: Scalar>(
    samples: &[SceneSample<T>],
    cfg: &SceneConfig,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = format!(
        "seed={}\nheight={}\nwidth={}\nsamples={}\n",
        cfg.seed,
        cfg.height,
        cfg.width,
        samples.len()
    );
    fs::write(dir.join("meta"), meta)?;
    for (i, sample) in samples.iter().enumerate() {
        let sub = dir.join(format!("sample_{i:05}"));
        fs::create_dir_all(&sub)?;
        let s = sample.full.shape();
        let (h, w) = (s[1], s[2]);
        write_ppm(sub.join("full.ppm"), &tensor_to_rgb(&sample.full)?)?;
        write_ppm(sub.join("empty.ppm"), &tensor_to_rgb(&sample.empty)?)?;
        write_pgm(
            sub.join("mask.pgm"),
            &GrayImage {
                width: w,
                height: h,
                pixels: sample
                    .fg_mask
                    .data()
                    .iter()
                    .map(|&v| if v.to_f64() > 0.5 { 255 } else { 0 })
                    .collect(),
            },
        )?;
        write_pgm(
            sub.join("layout.pgm"),
            &GrayImage {
                width: w,
                height: h,
                pixels: sample
                    .gt_layout
                    .data()
                    .iter()
                    .map(|&l| l * LAYOUT_SCALE)
                    .collect(),
            },
        )?;
        fs::write(sub.join("meta"), format!("index={i}\nheight={h}\nwidth={w}\n"))?;
    }
    Ok(())
}

/// Read a dataset written by [`write_dataset`], in sample order.
pub fn read_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<SceneSample<T>>> {
    let dir = dir.as_ref();
    let mut subdirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("sample_"))
        })
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Format(format!(
            "{}: no sample_* subdirectories",
            dir.display()
        )));
    }
    subdirs.into_iter().map(|sub| read_sample(&sub)).collect()
}

fn read_sample<T: Scalar>(sub: &Path) -> Result<SceneSample<T>> {
    let full = rgb_to_tensor(&read_ppm(sub.join("full.ppm"))?)?;
    let empty = rgb_to_tensor(&read_ppm(sub.join("empty.ppm"))?)?;
    let mask_img = read_pgm(sub.join("mask.pgm"))?;
    let layout_img = read_pgm(sub.join("layout.pgm"))?;
    let (h, w) = (mask_img.height, mask_img.width);
    if full.shape() != [3, h, w] {
        return Err(Error::Format(format!(
            "{}: image sizes disagree",
            sub.display()
        )));
    }
    let fg_mask = Tensor::from_vec(
        &[1, h, w],
        mask_img
            .pixels
            .iter()
            .map(|&b| if b > 127 { T::ONE } else { T::ZERO })
            .collect(),
    )?;
    let labels: Vec<u8> = layout_img
        .pixels
        .iter()
        .map(|&b| {
            let l = b / LAYOUT_SCALE;
            if l as usize >= CLASSES || b % LAYOUT_SCALE != 0 {
                Err(Error::Format(format!(
                    "{}: invalid layout byte {b}",
                    sub.display()
                )))
            } else {
                Ok(l)
            }
        })
        .collect::<Result<_>>()?;
    Ok(SceneSample {
        full,
        empty,
        fg_mask,
        gt_layout: LabelMap::new(&[h, w], labels)?,
    })
}

/// Check that generated or loaded samples honor the scene invariants.
pub fn validate_sample<T: Scalar>(s: &SceneSample<T>) -> Result<()> {
    let shape = s.full.shape().to_vec();
    let plane = shape[1] * shape[2];
    // background passthrough outside the mask, exactly
    for p in 0..plane {
        if s.fg_mask.data()[p] == T::ZERO {
            for c in 0..3 {
                if s.full.data()[c * plane + p] != s.empty.data()[c * plane + p] {
                    return Err(Error::Numeric(format!(
                        "furnished differs from empty outside the mask at pixel {p}"
                    )));
                }
            }
        }
    }
    let frac = s.mask_fraction();
    if !(MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&frac) {
        return Err(Error::Numeric(format!("mask coverage {frac} out of range")));
    }
    let mut counts = [0usize; CLASSES];
    for &l in s.gt_layout.data() {
        counts[l as usize] += 1;
    }
    for &c in &counts {
        let f = c as f64 / plane as f64;
        if !(MIN_CLASS_FRACTION..=MAX_CLASS_FRACTION).contains(&f) {
            return Err(Error::Numeric(format!("class fraction {f} out of range")));
        }
    }
    Ok(())
}

/// In-memory value range of quantized scene pixels.
pub fn pixel_value_range() -> (f64, f64) {
    (dequantize(0), dequantize(255))
}
