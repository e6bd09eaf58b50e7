use std::rc::Rc;

use super::Ops;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::kernels::{self as k, ConvGeom};
use crate::tensor::Tensor;

/// Immediate evaluation without gradient bookkeeping.
#[derive(Debug, Default)]
pub struct Eager;

impl Eager {
    pub fn new() -> Self {
        Eager
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Rc<Tensor> {
    Rc::new(x.map(f))
}

impl Ops for Eager {
    type V = Rc<Tensor>;

    fn constant(&mut self, t: Tensor) -> Self::V {
        Rc::new(t)
    }

    fn param(&mut self, set: &ParameterSet, name: &str) -> Result<Self::V> {
        Ok(Rc::new(set.get(name)?.clone()))
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor {
        v
    }

    fn detach(&mut self, v: &Self::V) -> Self::V {
        v.clone()
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, g: ConvGeom) -> Result<Self::V> {
        Ok(Rc::new(k::conv2d(x, w, b.map(|b| &**b), g)?))
    }

    fn conv_transpose2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, g: ConvGeom) -> Result<Self::V> {
        Ok(Rc::new(k::conv_transpose2d(x, w, b.map(|b| &**b), g)?))
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        Ok(Rc::new(k::linear(x, w, b.map(|b| &**b))?))
    }

    fn batch_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, eps: f64) -> Result<Self::V> {
        Ok(Rc::new(k::batch_norm(x, gamma.data(), beta.data(), eps)?.0))
    }

    fn relu(&mut self, x: &Self::V) -> Self::V {
        unary(x, |v| v.max(0.0))
    }

    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Self::V {
        unary(x, |v| if v > 0.0 { v } else { slope * v })
    }

    fn softplus(&mut self, x: &Self::V) -> Self::V {
        unary(x, k::softplus)
    }

    fn scale(&mut self, x: &Self::V, s: f64) -> Self::V {
        unary(x, |v| v * s)
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(a.zip_map(b, |x, y| x + y)?))
    }

    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(a.zip_map(b, |x, y| x - y)?))
    }

    fn sub_scalar(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V> {
        if s.numel() != 1 {
            return Err(Error::shape("sub_scalar expects a one-element operand"));
        }
        let s = s.data()[0];
        Ok(unary(x, |v| v - s))
    }

    fn mean(&mut self, x: &Self::V) -> Self::V {
        Rc::new(Tensor::scalar(x.mean()))
    }

    fn weighted_sum(&mut self, terms: &[(Self::V, f64)]) -> Result<Self::V> {
        let (first, w0) = terms
            .first()
            .ok_or_else(|| Error::shape("weighted sum of nothing"))?;
        let mut acc = first.map(|v| v * w0);
        for (t, w) in &terms[1..] {
            acc = acc.zip_map(t, |a, b| a + w * b)?;
        }
        Ok(Rc::new(acc))
    }

    fn concat_channels(&mut self, xs: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Tensor> = xs.iter().map(|x| &**x).collect();
        Ok(Rc::new(k::concat_channels(&refs)?))
    }

    fn upsample_bilinear2x(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(k::upsample_bilinear2x(x)?))
    }

    fn max_pool2x2(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(k::max_pool2x2(x)?.0))
    }

    fn crop(&mut self, x: &Self::V, h: usize, w: usize) -> Result<Self::V> {
        Ok(Rc::new(k::crop(x, h, w)?))
    }

    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        Ok(Rc::new((**x).clone().reshape(shape)?))
    }

    fn channel_affine(&mut self, x: &Self::V, scale: &[f64], shift: &[f64]) -> Result<Self::V> {
        Ok(Rc::new(k::channel_affine(x, scale, shift)?))
    }

    fn attention(&mut self, theta: &Self::V, phi: &Self::V, g: &Self::V, tile: Option<usize>) -> Result<Self::V> {
        Ok(Rc::new(k::attention(theta, phi, g, tile)?.0))
    }

    fn l1(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(Tensor::scalar(a.zip_map(b, |x, y| (x - y).abs())?.mean())))
    }

    fn mse(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(Tensor::scalar(
            a.zip_map(b, |x, y| (x - y) * (x - y))?.mean(),
        )))
    }
}
