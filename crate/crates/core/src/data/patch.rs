//! Aligned random crops of training pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::LoadedPair;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

pub fn sample_window<R: Rng>(height: usize, width: usize, patch: usize, rng: &mut R) -> Result<PatchWindow> {
    if patch == 0 || patch > height || patch > width {
        return Err(Error::shape(format!(
            "patch {patch} does not fit a {width}x{height} image"
        )));
    }
    Ok(PatchWindow {
        top: rng.random_range(0..=height - patch),
        left: rng.random_range(0..=width - patch),
        size: patch,
    })
}

/// `image[.., top..top+size, left..left+size]`.
pub fn crop_window(image: &Tensor, win: PatchWindow) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    if win.top + win.size > h || win.left + win.size > w {
        return Err(Error::shape(format!("window {win:?} outside {w}x{h} image")));
    }
    let s = win.size;
    let mut out = Vec::with_capacity(n * c * s * s);
    let d = image.data();
    for plane in 0..n * c {
        for y in win.top..win.top + s {
            let row = plane * h * w + y * w;
            out.extend_from_slice(&d[row + win.left..row + win.left + s]);
        }
    }
    Tensor::new([n, c, s, s], out)
}

/// Same-window crops of the original and compressed images.
pub fn sample_patch_with<R: Rng>(pair: &LoadedPair, patch: usize, rng: &mut R) -> Result<(Tensor, Tensor, PatchWindow)> {
    let win = sample_window(pair.pair.height, pair.pair.width, patch, rng)?;
    Ok((crop_window(&pair.original, win)?, crop_window(&pair.compressed, win)?, win))
}

/// [`sample_patch_with`] driven by a fresh generator seeded with `seed`.
pub fn sample_patch(pair: &LoadedPair, patch: usize, seed: u64) -> Result<(Tensor, Tensor, PatchWindow)> {
    sample_patch_with(pair, patch, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::ImagePair;

    fn loaded() -> LoadedPair {
        let o = Tensor::from_fn([1, 3, 20, 30], |i| i as f64);
        let c = o.map(|v| -v);
        LoadedPair::new(
            ImagePair {
                original: "o.png".into(),
                compressed: "c.png".into(),
                qp: 37,
                bits: 8,
                width: 30,
                height: 20,
            },
            o,
            c,
        )
        .unwrap()
    }

    #[test]
    fn seeded_and_aligned() {
        let p = loaded();
        let (a, b, win) = sample_patch(&p, 8, 5).unwrap();
        let (a2, b2, win2) = sample_patch(&p, 8, 5).unwrap();
        assert_eq!((a.clone(), b.clone(), win), (a2, b2, win2));
        assert_eq!(a.shape(), &[1, 3, 8, 8]);
        assert_eq!(b, a.map(|v| -v));
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(a.at4(0, c, y, x), p.original.at4(0, c, win.top + y, win.left + x));
                }
            }
        }
    }

    #[test]
    fn oversized_patch() {
        assert!(sample_patch(&loaded(), 21, 0).is_err());
        assert!(sample_patch(&loaded(), 20, 0).is_ok());
    }
}
