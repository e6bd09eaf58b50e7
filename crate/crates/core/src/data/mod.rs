//! Compressed training pairs: colorspace, codec driver, manifests and patches.

pub mod codec;
pub mod color;
pub mod image_io;
pub mod manifest;
pub mod patch;

pub use codec::{encode_decode, CodecSpec, Coded};
pub use color::{quantize_8bit, rgb_to_yuv444, yuv444_to_rgb, COLORSPACE};
pub use image_io::{load_png, save_png};
pub use manifest::{build_manifest, DatasetManifest, ImagePair, LoadedPair, PairFailure};
pub use patch::{crop_window, sample_patch, sample_patch_with, PatchWindow};
