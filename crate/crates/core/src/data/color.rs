//! BT.601 full-range RGB ↔ YUV444 and 8-bit planar conversion.
//!
//! Chroma is offset-binary: `U = (B − Y)/1.772 + ½`, `V = (R − Y)/1.402 + ½`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifier written to manifests so evaluation uses the same matrix.
pub const COLORSPACE: &str = "bt601-full";

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;
const CB: f64 = 2.0 * (1.0 - KB);
const CR: f64 = 2.0 * (1.0 - KR);

fn check_three(image: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    Ok((n, h, w))
}

fn per_pixel(image: &Tensor, clip: bool, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Tensor> {
    let (n, h, w) = check_three(image)?;
    let plane = h * w;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        let base = b * 3 * plane;
        for p in 0..plane {
            let px = [src[base + p], src[base + plane + p], src[base + 2 * plane + p]];
            let q = f(px);
            for c in 0..3 {
                out[base + c * plane + p] = if clip { q[c].clamp(0.0, 1.0) } else { q[c] };
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

fn forward([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = KR * r + KG * g + KB * b;
    [y, (b - y) / CB + 0.5, (r - y) / CR + 0.5]
}

fn inverse([y, u, v]: [f64; 3]) -> [f64; 3] {
    let r = y + CR * (v - 0.5);
    let b = y + CB * (u - 0.5);
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

/// RGB in `[0, 1]` to YUV444 in `[0, 1]`, clipped.
pub fn rgb_to_yuv444(image: &Tensor) -> Result<Tensor> {
    per_pixel(image, true, forward)
}

/// YUV444 in `[0, 1]` to RGB in `[0, 1]`, clipped.
pub fn yuv444_to_rgb(image: &Tensor) -> Result<Tensor> {
    per_pixel(image, true, inverse)
}

/// The forward transform without clipping.
pub fn rgb_to_yuv444_unclipped(image: &Tensor) -> Result<Tensor> {
    per_pixel(image, false, forward)
}

/// The inverse transform without clipping.
pub fn yuv444_to_rgb_unclipped(image: &Tensor) -> Result<Tensor> {
    per_pixel(image, false, inverse)
}

/// `[0, 1]` to an 8-bit code: clip, then round half away from zero.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every sample to the nearest 8-bit level (values stay in `[0, 1]`).
pub fn quantize_8bit(image: &Tensor) -> Tensor {
    image.map(|v| to_u8(v) as f64 / 255.0)
}

/// Single image `(1, 3, H, W)` YUV in `[0, 1]` to the raw planar file layout:
/// Y plane, then U, then V, each row-major, one byte per sample.
pub fn yuv_to_planar_bytes(yuv: &Tensor) -> Result<Vec<u8>> {
    let (n, _, _) = check_three(yuv)?;
    if n != 1 {
        return Err(Error::shape(format!("expected a single image, got batch of {n}")));
    }
    Ok(yuv.data().iter().map(|&v| to_u8(v)).collect())
}

/// Inverse of [`yuv_to_planar_bytes`].
pub fn planar_bytes_to_yuv(bytes: &[u8], width: usize, height: usize) -> Result<Tensor> {
    let expected = 3 * width * height;
    if bytes.len() != expected {
        return Err(Error::shape(format!(
            "raw YUV444 {width}x{height} needs {expected} bytes, got {}",
            bytes.len()
        )));
    }
    Tensor::new(
        [1, 3, height, width],
        bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}
