#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use msgdn::data::codec::{stub_decode, stub_encode};
use msgdn::data::color::{planar_bytes_to_yuv, quantize_8bit, rgb_to_yuv444, yuv444_to_rgb, yuv_to_planar_bytes};
use msgdn::Tensor;
use sha2::{Digest, Sha256};

/// Smooth 8-bit test picture; `k` varies the pattern.
pub fn synth(h: usize, w: usize, k: f64) -> Tensor {
    let mut t = Tensor::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            t.set4(0, 0, y, x, 0.5 + 0.35 * ((xf / 9.0 + yf / 13.0) * k).sin());
            t.set4(0, 1, y, x, 0.45 + 0.3 * ((xf / 17.0 - yf / 7.0) * k).cos());
            t.set4(0, 2, y, x, 0.5 + 0.25 * ((xf * yf / 300.0) + k).sin());
        }
    }
    quantize_8bit(&t)
}

/// Runs `image` through the in-process stub codec at `qp`.
pub fn stub_code(image: &Tensor, qp: i32) -> Tensor {
    let (_, _, h, w) = image.dims4().unwrap();
    let raw = yuv_to_planar_bytes(&rgb_to_yuv444(image).unwrap()).unwrap();
    let (dec, _, _) = stub_decode(&stub_encode(&raw, w, h, qp).unwrap()).unwrap();
    quantize_8bit(&yuv444_to_rgb(&planar_bytes_to_yuv(&dec, w, h).unwrap()).unwrap())
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_msgdn"))
}

/// Runs the CLI and panics with its output on failure.
pub fn msgdn(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().expect("spawn msgdn");
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.status.success(), "msgdn {args:?} failed:\n{text}");
    text
}

pub fn sha256_file(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    hex::encode(Sha256::digest(bytes))
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
