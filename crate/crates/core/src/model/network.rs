use std::path::Path;

use serde_json::json;

use super::blocks::{downsample, grdb_forward, non_local, AttentionPolicy};
use super::config::{InitOptions, ModelConfig, UpsampleMode};
use crate::archive::Archive;
use crate::autodiff::{Eager, Ops};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Original spatial size of a padded tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

impl CropRecord {
    /// True when padding added nothing.
    pub fn is_noop(&self, padded: &Tensor) -> bool {
        padded
            .dims4()
            .map(|(_, _, h, w)| h == self.height && w == self.width)
            .unwrap_or(false)
    }

    pub fn apply(&self, padded: &Tensor) -> Result<Tensor> {
        kernels::crop(padded, self.height, self.width)
    }
}

/// Reflect-pads the bottom/right edges so both spatial dims are multiples of `m`.
pub fn pad_to_multiple(image: &Tensor, m: usize) -> Result<(Tensor, CropRecord)> {
    if m == 0 {
        return Err(Error::config("padding multiple must be at least 1"));
    }
    let (_, _, h, w) = image.dims4()?;
    let record = CropRecord {
        height: h,
        width: w,
    };
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok((image.clone(), record));
    }
    Ok((kernels::reflect_pad(image, ph, pw)?, record))
}

fn conv<O: Ops>(ops: &mut O, x: &O::V, params: &ParameterSet, name: &str, g: ConvGeom) -> Result<O::V> {
    let w = ops.param(params, &format!("{name}.weight"))?;
    let b = ops.param(params, &format!("{name}.bias"))?;
    ops.conv2d(x, &w, Some(&b), g)
}

/// Full generator forward pass. Output has the input's shape for any `H, W`.
pub fn msgdn_forward<O: Ops>(
    ops: &mut O,
    image: &Tensor,
    params: &ParameterSet,
    config: &ModelConfig,
) -> Result<O::V> {
    config.validate()?;
    let (_, c, _, _) = image.dims4()?;
    if c != config.input_channels {
        return Err(Error::shape(format!(
            "model expects {} input channels, got {c}",
            config.input_channels
        )));
    }
    params.check_finite()?;

    let (padded, crop) = pad_to_multiple(image, config.pad_multiple())?;
    let same = ConvGeom {
        stride: 1,
        pad: config.kernel_size / 2,
    };
    let x = ops.constant(padded.clone());

    let mut feats = vec![conv(ops, &x, params, "head", same)?];
    for s in 1..config.num_scales {
        let prev = feats[s - 1].clone();
        feats.push(downsample(ops, &prev, params, &format!("down.{s}"))?);
    }

    let mut scale_out = Vec::with_capacity(config.num_scales);
    for (s, f) in feats.iter().enumerate() {
        let mut h = f.clone();
        for g in 0..config.grdbs_per_scale {
            h = grdb_forward(
                ops,
                &h,
                params,
                &format!("scale.{s}.grdb.{g}"),
                config.rdbs_per_grdb,
                config.growth_rate,
                config.convs_per_rdb,
            )?;
        }
        scale_out.push(h);
    }

    let mut merged = scale_out[config.num_scales - 1].clone();
    for s in (0..config.num_scales - 1).rev() {
        let prefix = format!("fusion.{s}");
        let up = match config.upsample {
            UpsampleMode::Bilinear => ops.upsample_bilinear2x(&merged)?,
            UpsampleMode::Transposed => {
                let w = ops.param(params, &format!("{prefix}.up.weight"))?;
                let b = ops.param(params, &format!("{prefix}.up.bias"))?;
                ops.conv_transpose2d(&merged, &w, Some(&b), ConvGeom { stride: 2, pad: 1 })?
            }
        };
        let cat = ops.concat_channels(&[scale_out[s].clone(), up])?;
        let fused = conv(ops, &cat, params, &format!("{prefix}.conv"), ConvGeom::POINTWISE)?;
        let (_, _, h, w) = ops.value(&fused).dims4()?;
        let policy = if h * w <= config.attention_cap {
            AttentionPolicy::global(config.attention_cap)
        } else {
            AttentionPolicy {
                cap: config.attention_cap,
                tile: Some(config.attention_tile),
            }
        };
        merged = non_local(ops, &fused, params, &format!("{prefix}.nonlocal"), policy)?;
    }

    let mut out = conv(ops, &merged, params, "tail", same)?;
    if config.use_global_residual {
        out = ops.add(&out, &x)?;
    }
    if crop.is_noop(&padded) {
        Ok(out)
    } else {
        ops.crop(&out, crop.height, crop.width)
    }
}

/// A configured generator with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Msgdn {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Msgdn {
    pub fn new(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config.param_shapes())?;
        Ok(Msgdn { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64, opts: InitOptions) -> Result<Self> {
        let params = config.init_params(seed, opts)?;
        Ok(Msgdn { config, params })
    }

    /// Eager inference.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut ops = Eager::new();
        let out = msgdn_forward(&mut ops, image, &self.params, &self.config)?;
        Ok(std::rc::Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
    }

    pub fn forward_with<O: Ops>(&self, ops: &mut O, image: &Tensor) -> Result<O::V> {
        msgdn_forward(ops, image, &self.params, &self.config)
    }

    /// Zeros the reconstruction conv, making the model the identity when the
    /// global residual is enabled.
    pub fn zero_residual_path(&mut self) -> Result<()> {
        for name in ["tail.weight", "tail.bias"] {
            self.params
                .get_mut(name)?
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        Ok(())
    }

    pub fn metadata(&self) -> serde_json::Value {
        json!({
            "format": "msgdn-archive",
            "version": 1,
            "kind": "params",
            "model": self.config,
            "fingerprint": self.config.fingerprint(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(self.metadata());
        a.insert_section("generator", self.params.iter());
        a.save(path)
    }

    /// Loads from a parameter archive or a training checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, path)
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Archive {
            path: path.to_path_buf(),
            reason,
        };
        let config: ModelConfig = serde_json::from_value(a.metadata["model"].clone())
            .map_err(|e| bad(format!("model config: {e}")))?;
        let stored = a.metadata["fingerprint"].as_str().unwrap_or_default();
        if stored != config.fingerprint() {
            return Err(bad(format!(
                "config fingerprint {stored} does not match this build ({}); refusing to load",
                config.fingerprint()
            )));
        }
        let params = ParameterSet::from_map(a.section("generator"));
        params
            .check_shapes(&config.param_shapes())
            .map_err(|e| bad(e.to_string()))?;
        Ok(Msgdn { config, params })
    }
}
