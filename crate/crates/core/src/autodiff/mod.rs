//! Differentiable operations.
//!
//! Network code is written once against the [`Ops`] trait and evaluated either
//! eagerly ([`Eager`], inference, intermediate values dropped as soon as they
//! go out of scope) or on a [`Tape`] that records every operation so that
//! [`Tape::backward`] can produce parameter gradients.

mod eager;
mod tape;

pub use eager::Eager;
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;
use crate::params::ParameterSet;
use crate::tensor::kernels::ConvGeom;
use crate::tensor::Tensor;

pub trait Ops {
    type V: Clone;

    /// A value that gradients never flow into.
    fn constant(&mut self, t: Tensor) -> Self::V;
    /// A named parameter from `set`.
    fn param(&mut self, set: &ParameterSet, name: &str) -> Result<Self::V>;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    /// Same value, gradient flow severed.
    fn detach(&mut self, v: &Self::V) -> Self::V {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, g: ConvGeom) -> Result<Self::V>;
    fn conv_transpose2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        g: ConvGeom,
    ) -> Result<Self::V>;
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn batch_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, eps: f64) -> Result<Self::V>;

    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Self::V;
    fn softplus(&mut self, x: &Self::V) -> Self::V;
    fn scale(&mut self, x: &Self::V, k: f64) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// `x - s` where `s` holds a single element.
    fn sub_scalar(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V>;
    /// Mean of all elements, as a one-element tensor.
    fn mean(&mut self, x: &Self::V) -> Self::V;
    /// `Σ w_i · x_i` over same-shaped values.
    fn weighted_sum(&mut self, terms: &[(Self::V, f64)]) -> Result<Self::V>;

    fn concat_channels(&mut self, xs: &[Self::V]) -> Result<Self::V>;
    fn upsample_bilinear2x(&mut self, x: &Self::V) -> Result<Self::V>;
    fn max_pool2x2(&mut self, x: &Self::V) -> Result<Self::V>;
    fn crop(&mut self, x: &Self::V, h: usize, w: usize) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn channel_affine(&mut self, x: &Self::V, scale: &[f64], shift: &[f64]) -> Result<Self::V>;
    fn attention(
        &mut self,
        theta: &Self::V,
        phi: &Self::V,
        g: &Self::V,
        tile: Option<usize>,
    ) -> Result<Self::V>;

    /// Mean absolute difference.
    fn l1(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// Mean squared difference.
    fn mse(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
}

/// Convenience: scalar value of a one-element result.
pub fn scalar<O: Ops>(ops: &O, v: &O::V) -> f64 {
    ops.value(v).data()[0]
}
