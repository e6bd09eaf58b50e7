use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Bumped whenever the layer layout or forward computation changes, so that
/// archives written by an incompatible build are refused.
pub const ARCHITECTURE_REVISION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Bilinear ×2 (half-pixel centres) followed by the fusion 1×1 conv.
    Bilinear,
    /// Learned 4×4 stride-2 transposed convolution.
    Transposed,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_scales: usize,
    /// Feature widths ordered lowest resolution first.
    pub channels_per_scale: Vec<usize>,
    pub rdbs_per_grdb: usize,
    pub convs_per_rdb: usize,
    pub grdbs_per_scale: usize,
    pub growth_rate: usize,
    pub kernel_size: usize,
    pub input_channels: usize,
    pub use_global_residual: bool,
    pub upsample: UpsampleMode,
    /// Largest number of positions a single attention map may cover.
    pub attention_cap: usize,
    /// Tile side used when a fusion map exceeds `attention_cap`.
    pub attention_tile: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_scales: 3,
            channels_per_scale: vec![128, 128, 64],
            rdbs_per_grdb: 4,
            convs_per_rdb: 8,
            grdbs_per_scale: 1,
            growth_rate: 32,
            kernel_size: 3,
            input_channels: 3,
            use_global_residual: true,
            upsample: UpsampleMode::Bilinear,
            attention_cap: 96 * 96,
            attention_tile: 96,
        }
    }
}

impl ModelConfig {
    /// A narrow configuration with the same topology, for tests and smoke runs.
    pub fn tiny() -> Self {
        ModelConfig {
            channels_per_scale: vec![8, 8, 4],
            rdbs_per_grdb: 2,
            convs_per_rdb: 2,
            growth_rate: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 {
            return Err(Error::config("num_scales must be positive"));
        }
        if self.channels_per_scale.len() != self.num_scales {
            return Err(Error::config(format!(
                "num_scales is {} but {} channel widths were given",
                self.num_scales,
                self.channels_per_scale.len()
            )));
        }
        let counts = [
            ("rdbs_per_grdb", self.rdbs_per_grdb),
            ("convs_per_rdb", self.convs_per_rdb),
            ("grdbs_per_scale", self.grdbs_per_scale),
            ("growth_rate", self.growth_rate),
            ("kernel_size", self.kernel_size),
            ("input_channels", self.input_channels),
            ("attention_cap", self.attention_cap),
            ("attention_tile", self.attention_tile),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.channels_per_scale.contains(&0) {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("kernel_size must be odd"));
        }
        if self.attention_tile * self.attention_tile > self.attention_cap {
            return Err(Error::config("attention_tile² exceeds attention_cap"));
        }
        Ok(())
    }

    /// Feature width at scale `s` (0 = full resolution).
    pub fn width(&self, s: usize) -> usize {
        self.channels_per_scale[self.num_scales - 1 - s]
    }

    /// Spatial multiple the input is padded to.
    pub fn pad_multiple(&self) -> usize {
        1 << (self.num_scales - 1)
    }

    pub fn nonlocal_width(&self, s: usize) -> usize {
        (self.width(s) / 2).max(1)
    }

    /// Every parameter name with its shape.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let k = self.kernel_size;
        let g = self.growth_rate;
        let mut out = BTreeMap::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.insert(format!("{name}.weight"), vec![cout, cin, k, k]);
            out.insert(format!("{name}.bias"), vec![cout]);
        };
        conv("head".into(), self.width(0), self.input_channels, k);
        for s in 1..self.num_scales {
            conv(format!("down.{s}"), self.width(s), self.width(s - 1), k);
        }
        for s in 0..self.num_scales {
            let c = self.width(s);
            for gi in 0..self.grdbs_per_scale {
                let grdb = format!("scale.{s}.grdb.{gi}");
                for r in 0..self.rdbs_per_grdb {
                    let rdb = format!("{grdb}.rdb.{r}");
                    for i in 0..self.convs_per_rdb {
                        conv(format!("{rdb}.conv.{i}"), g, c + i * g, k);
                    }
                    conv(format!("{rdb}.fuse"), c, c + self.convs_per_rdb * g, 1);
                }
                conv(format!("{grdb}.fuse"), c, self.rdbs_per_grdb * c, 1);
            }
        }
        for s in 0..self.num_scales.saturating_sub(1) {
            let (c, lower) = (self.width(s), self.width(s + 1));
            let f = format!("fusion.{s}");
            if self.upsample == UpsampleMode::Transposed {
                // transposed kernels are stored (in, out, k, k)
                conv(format!("{f}.up"), lower, lower, 4);
            }
            conv(format!("{f}.conv"), c, c + lower, 1);
            let nl = self.nonlocal_width(s);
            conv(format!("{f}.nonlocal.theta"), nl, c, 1);
            conv(format!("{f}.nonlocal.phi"), nl, c, 1);
            conv(format!("{f}.nonlocal.g"), nl, c, 1);
            conv(format!("{f}.nonlocal.out"), c, nl, 1);
        }
        conv("tail".into(), self.input_channels, self.width(0), k);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .values()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Stable identifier of this configuration and the code revision.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let mut h = Sha256::new();
        h.update(format!("msgdn-r{ARCHITECTURE_REVISION}:").as_bytes());
        h.update(canonical.as_bytes());
        hex::encode(&h.finalize()[..8])
    }

    /// Fresh parameters drawn from a seeded generator.
    pub fn init_params(&self, seed: u64, opts: InitOptions) -> Result<ParameterSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParameterSet::new();
        for (name, shape) in self.param_shapes() {
            let numel: usize = shape.iter().product();
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else if name.starts_with("tail.") && opts.zero_tail {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = if name.ends_with(".up.weight") {
                    shape[0] * shape[2] * shape[3] / 4
                } else {
                    shape[1..].iter().product()
                };
                let mut std = (2.0 / fan_in as f64).sqrt();
                if name.contains(".rdb.") || name.ends_with("nonlocal.out.weight") {
                    std *= opts.residual_scale;
                }
                let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                let data = (0..numel).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape, data)?
            };
            set.insert(name, t)?;
        }
        Ok(set)
    }
}

/// Parameter initialisation knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    /// Multiplier on the He-normal std of residual-branch convolutions.
    pub residual_scale: f64,
    /// Start the reconstruction conv at zero, making the untrained network the
    /// identity when the global residual is on.
    pub zero_tail: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            residual_scale: 0.1,
            zero_tail: true,
        }
    }
}

impl InitOptions {
    /// Every weight random at full scale (used by gradient checks).
    pub fn dense() -> Self {
        InitOptions {
            residual_scale: 1.0,
            zero_tail: false,
        }
    }
}
