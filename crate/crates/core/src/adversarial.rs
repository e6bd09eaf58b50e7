//! Relativistic-average discriminator and its losses.
//!
//! With `C` the raw discriminator logit and `f` the logistic sigmoid,
//! `D(x_r, x_f) = f(C(x_r) − mean C(x_f))`. The discriminator minimises
//! `−mean_r log D(x_r, x_f) − mean_f log(1 − D(x_f, x_r))` and the generator
//! minimises the role-swapped form. Every `log D` / `log(1 − D)` is evaluated
//! as a negative softplus of a signed logit difference, so the losses stay
//! finite for arbitrarily confident logits.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Ops};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::kernels::{sigmoid, softplus, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Fake,
}

/// Discriminator outputs for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitBatch {
    values: Vec<f64>,
    pub origin: Origin,
}

impl LogitBatch {
    pub fn new(values: Vec<f64>, origin: Origin) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("logit batch is empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("discriminator logit".into()));
        }
        Ok(LogitBatch { values, origin })
    }

    pub fn real(values: Vec<f64>) -> Result<Self> {
        Self::new(values, Origin::Real)
    }

    pub fn fake(values: Vec<f64>) -> Result<Self> {
        Self::new(values, Origin::Fake)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// `sigmoid(C(x_i) − mean(other))` for every element of `primary`.
pub fn relativistic_d(primary: &LogitBatch, other: &LogitBatch) -> Vec<f64> {
    let m = other.mean();
    primary.values.iter().map(|c| sigmoid(c - m)).collect()
}

fn mean_softplus(batch: &LogitBatch, offset: f64, sign: f64) -> f64 {
    batch
        .values
        .iter()
        .map(|c| softplus(sign * (c - offset)))
        .sum::<f64>()
        / batch.len() as f64
}

/// Discriminator objective.
pub fn discriminator_loss(c_real: &LogitBatch, c_fake: &LogitBatch) -> f64 {
    // −log D(x_r, x_f) = softplus(−(c_r − m_f)); −log(1 − D(x_f, x_r)) = softplus(c_f − m_r)
    mean_softplus(c_real, c_fake.mean(), -1.0) + mean_softplus(c_fake, c_real.mean(), 1.0)
}

/// Generator adversarial objective, the role-swapped discriminator loss.
pub fn generator_adv_loss(c_real: &LogitBatch, c_fake: &LogitBatch) -> f64 {
    mean_softplus(c_real, c_fake.mean(), 1.0) + mean_softplus(c_fake, c_real.mean(), -1.0)
}

fn rel_terms<O: Ops>(ops: &mut O, primary: &O::V, other: &O::V, sign: f64) -> Result<O::V> {
    let m = ops.mean(other);
    let d = ops.sub_scalar(primary, &m)?;
    let d = if sign < 0.0 { ops.scale(&d, -1.0) } else { d };
    let s = ops.softplus(&d);
    Ok(ops.mean(&s))
}

/// Differentiable [`discriminator_loss`] over logit tensors.
pub fn discriminator_loss_op<O: Ops>(ops: &mut O, c_real: &O::V, c_fake: &O::V) -> Result<O::V> {
    let a = rel_terms(ops, c_real, c_fake, -1.0)?;
    let b = rel_terms(ops, c_fake, c_real, 1.0)?;
    ops.add(&a, &b)
}

/// Differentiable [`generator_adv_loss`] over logit tensors.
pub fn generator_adv_loss_op<O: Ops>(ops: &mut O, c_real: &O::V, c_fake: &O::V) -> Result<O::V> {
    let a = rel_terms(ops, c_real, c_fake, 1.0)?;
    let b = rel_terms(ops, c_fake, c_real, -1.0)?;
    ops.add(&a, &b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Batch statistics of the current forward call.
    Batch,
}

/// Plain convolutional classifier: a stem conv, `num_downsampling_stages`
/// stages of (stride-2 conv, conv) with normalisation and leaky ReLU, then two
/// dense layers to a scalar logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub num_downsampling_stages: usize,
    pub patch_size: usize,
    pub input_channels: usize,
    pub max_channels: usize,
    pub hidden_units: usize,
    pub leaky_slope: f64,
    pub norm: Normalization,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 64,
            num_downsampling_stages: 4,
            patch_size: 64,
            input_channels: 3,
            max_channels: 512,
            hidden_units: 100,
            leaky_slope: 0.2,
            norm: Normalization::Batch,
        }
    }
}

const BN_EPS: f64 = 1e-5;

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("patch_size", self.patch_size),
            ("input_channels", self.input_channels),
            ("max_channels", self.max_channels),
            ("hidden_units", self.hidden_units),
        ] {
            if v == 0 {
                return Err(Error::config(format!("discriminator {name} must be positive")));
            }
        }
        let div = 1usize << self.num_downsampling_stages;
        if self.patch_size % div != 0 {
            return Err(Error::config(format!(
                "patch size {} is not divisible by 2^{}",
                self.patch_size, self.num_downsampling_stages
            )));
        }
        Ok(())
    }

    fn stage_width(&self, s: usize) -> usize {
        (self.base_channels << s).min(self.max_channels)
    }

    fn final_side(&self) -> usize {
        self.patch_size >> self.num_downsampling_stages
    }

    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        let mut conv = |name: &str, cout: usize, cin: usize| {
            out.insert(format!("{name}.weight"), vec![cout, cin, 3, 3]);
            out.insert(format!("{name}.bias"), vec![cout]);
        };
        conv("stem", self.base_channels, self.input_channels);
        let mut prev = self.base_channels;
        for s in 0..self.num_downsampling_stages {
            let c = self.stage_width(s);
            conv(&format!("stage.{s}.down"), c, prev);
            conv(&format!("stage.{s}.conv"), c, c);
            prev = c;
        }
        if self.norm == Normalization::Batch {
            for s in 0..self.num_downsampling_stages {
                let c = self.stage_width(s);
                for n in ["down_norm", "conv_norm"] {
                    out.insert(format!("stage.{s}.{n}.weight"), vec![c]);
                    out.insert(format!("stage.{s}.{n}.bias"), vec![c]);
                }
            }
        }
        let side = self.final_side();
        out.insert("dense.0.weight".into(), vec![self.hidden_units, prev * side * side]);
        out.insert("dense.0.bias".into(), vec![self.hidden_units]);
        out.insert("dense.1.weight".into(), vec![1, self.hidden_units]);
        out.insert("dense.1.bias".into(), vec![1]);
        out
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + self.leaky_slope * self.leaky_slope)).sqrt();
        let mut set = ParameterSet::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.contains("_norm.weight") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt())
                    .map_err(|e| Error::config(e.to_string()))?;
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
            };
            set.insert(name, t)?;
        }
        Ok(set)
    }
}

/// Logits `(n, 1)` for a batch of `(n, C, patch, patch)` images.
pub fn discriminator_forward<O: Ops>(
    ops: &mut O,
    images: &O::V,
    params: &ParameterSet,
    config: &DiscriminatorConfig,
) -> Result<O::V> {
    let (n, c, h, w) = ops.value(images).dims4()?;
    if c != config.input_channels || h != config.patch_size || w != config.patch_size {
        return Err(Error::shape(format!(
            "discriminator expects (n, {}, {p}, {p}) images, got {:?}",
            config.input_channels,
            ops.value(images).shape(),
            p = config.patch_size
        )));
    }
    let slope = config.leaky_slope;
    let layer = |ops: &mut O, x: &O::V, name: &str, stride: usize, norm: Option<&str>| -> Result<O::V> {
        let wt = ops.param(params, &format!("{name}.weight"))?;
        let b = ops.param(params, &format!("{name}.bias"))?;
        let mut y = ops.conv2d(x, &wt, Some(&b), ConvGeom { stride, pad: 1 })?;
        if let (Some(norm), Normalization::Batch) = (norm, config.norm) {
            let g = ops.param(params, &format!("{norm}.weight"))?;
            let bb = ops.param(params, &format!("{norm}.bias"))?;
            y = ops.batch_norm(&y, &g, &bb, BN_EPS)?;
        }
        Ok(ops.leaky_relu(&y, slope))
    };
    let mut x = layer(ops, images, "stem", 1, None)?;
    for s in 0..config.num_downsampling_stages {
        x = layer(ops, &x, &format!("stage.{s}.down"), 2, Some(&format!("stage.{s}.down_norm")))?;
        x = layer(ops, &x, &format!("stage.{s}.conv"), 1, Some(&format!("stage.{s}.conv_norm")))?;
    }
    let features = ops.value(&x).numel() / n;
    let flat = ops.reshape(&x, &[n, features])?;
    let w0 = ops.param(params, "dense.0.weight")?;
    let b0 = ops.param(params, "dense.0.bias")?;
    let hdn = ops.linear(&flat, &w0, Some(&b0))?;
    let hdn = ops.leaky_relu(&hdn, slope);
    let w1 = ops.param(params, "dense.1.weight")?;
    let b1 = ops.param(params, "dense.1.bias")?;
    ops.linear(&hdn, &w1, Some(&b1))
}

/// A configured discriminator with parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParameterSet,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config.param_shapes())?;
        Ok(Discriminator { config, params })
    }

    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Discriminator { config, params })
    }

    pub fn logits(&self, images: &Tensor, origin: Origin) -> Result<LogitBatch> {
        let mut ops = Eager::new();
        let x = ops.constant(images.clone());
        let y = discriminator_forward(&mut ops, &x, &self.params, &self.config)?;
        LogitBatch::new(y.data().to_vec(), origin)
    }
}
