//! Multi-scale grouped dense post-processing network for codec-compressed
//! images.
//!
//! The crate covers the whole desk-scale workflow: the generator network
//! ([`model`]), relativistic-average adversarial training ([`adversarial`],
//! [`losses`], [`train`]), building compressed training pairs through an
//! external codec ([`data`]), image-level rate allocation ([`alloc`]) and
//! rate–distortion evaluation ([`eval`]).

pub mod adversarial;
pub mod alloc;
pub mod archive;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ParameterSet;
pub use tensor::Tensor;
