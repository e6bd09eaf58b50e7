//! The multi-scale grouped dense generator.
//!
//! Three feature scales (full, 1/2 and 1/4 resolution by default) are produced
//! by a stride-2 convolution chain. Each scale runs grouped residual dense
//! blocks; the scales are then merged coarse-to-fine by upsampling,
//! concatenation, a 1×1 convolution and a non-local block. A global residual
//! adds the input image to the reconstruction.

mod blocks;
mod config;
mod network;

pub use blocks::{downsample, grdb_forward, non_local, rdb_forward, AttentionPolicy};
pub use config::{InitOptions, ModelConfig, UpsampleMode};
pub use network::{msgdn_forward, pad_to_multiple, CropRecord, Msgdn};
