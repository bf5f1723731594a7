//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Grayscale image buffer as read from or written to a PGM file.
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Interleaved RGB image buffer as read from or written to a PPM file.
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    if img.pixels.len() != img.width * img.height * 3 {
        return Err(Error::Format("ppm pixel buffer size mismatch".into()));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    if img.pixels.len() != img.width * img.height {
        return Err(Error::Format("pgm pixel buffer size mismatch".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let bytes = read_file(path.as_ref())?;
    let (w, h, data) = parse_pnm(&bytes, b'6', 3).map_err(|e| name_err(path.as_ref(), e))?;
    Ok(RgbImage {
        width: w,
        height: h,
        pixels: data,
    })
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let bytes = read_file(path.as_ref())?;
    let (w, h, data) = parse_pnm(&bytes, b'5', 1).map_err(|e| name_err(path.as_ref(), e))?;
    Ok(GrayImage {
        width: w,
        height: h,
        pixels: data,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn name_err(path: &Path, e: Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn parse_pnm(bytes: &[u8], kind: u8, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || bytes[0] != b'P' || bytes[1] != kind {
        return Err(Error::Format(format!(
            "bad magic, expected P{}",
            kind as char
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = parse_field(bytes, &mut pos)?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "truncated raster: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

fn parse_field(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // skip whitespace and '#' comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("missing header field".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("unparseable header field".into()))
}

/// Quantize a `[3, H, W]` tensor in `(-1, 1)` to interleaved 8-bit RGB.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!(
            "expected [3, H, W] image tensor, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let data = t.data();
    let mut pixels = vec![0u8; plane * 3];
    for i in 0..plane {
        for c in 0..3 {
            pixels[i * 3 + c] = quantize(data[c * plane + i].to_f64());
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

/// Inverse of [`tensor_to_rgb`]: bytes map to `v / 127.5 - 1`.
pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Result<Tensor<T>> {
    let plane = img.width * img.height;
    if img.pixels.len() != plane * 3 {
        return Err(Error::Format("rgb buffer size mismatch".into()));
    }
    let mut data = vec![T::ZERO; plane * 3];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = T::from_f64(dequantize(img.pixels[i * 3 + c]));
        }
    }
    Tensor::from_vec(&[3, img.height, img.width], data)
}

pub fn quantize(v: f64) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}
