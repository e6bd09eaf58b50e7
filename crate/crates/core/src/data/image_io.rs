//! 8-bit PNG images as `(1, 3, H, W)` tensors in `[0, 1]`.

use std::path::Path;

use crate::data::color::to_u8;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new([1, 3, h, w], data)
}

/// Interleaved 8-bit RGB samples of a single image.
pub fn to_rgb8(image: &Tensor) -> Result<(u32, u32, Vec<u8>)> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!(
            "expected one RGB image, got {:?}",
            image.shape()
        )));
    }
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(to_u8(d[ch * plane + i]));
        }
    }
    Ok((w as u32, h as u32, out))
}

/// Writes `image` as an 8-bit RGB PNG.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let (w, h, bytes) = to_rgb8(image)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer_with_format(path, &bytes, w, h, image::ExtendedColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Tensor::from_fn([1, 3, 5, 7], |i| ((i * 37) % 256) as f64 / 255.0);
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(back.shape(), &[1, 3, 5, 7]);
        assert!(back.max_abs_diff(&img).unwrap() < 1e-15);
    }

    #[test]
    fn unreadable_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_png(&p), Err(Error::Image { .. })));
    }
}
