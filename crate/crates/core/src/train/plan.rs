//! Training plans and the learning-rate schedule.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::losses::{FeatureExtractorSpec, HybridLossWeights};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Objective,
    Gan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLoss {
    L1,
    Mse,
    Hybrid,
}

impl PhaseLoss {
    pub fn name(self) -> &'static str {
        match self {
            PhaseLoss::L1 => "l1",
            PhaseLoss::Mse => "mse",
            PhaseLoss::Hybrid => "hybrid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub loss: PhaseLoss,
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Settings used only by the adversarial track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub discriminator: DiscriminatorConfig,
    pub weights: HybridLossWeights,
    /// Discriminator updates per generator update.
    pub d_steps_per_g: usize,
    /// Discriminator learning rate as a multiple of the generator's.
    pub d_lr_scale: f64,
    pub extractor: Option<FeatureExtractorSpec>,
    /// Mean `D(real)` above this counts towards a collapse.
    pub collapse_threshold: f64,
    /// Consecutive steps above the threshold before collapse is flagged.
    pub collapse_window: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            discriminator: DiscriminatorConfig::default(),
            weights: HybridLossWeights::default(),
            d_steps_per_g: 1,
            d_lr_scale: 1.0,
            extractor: None,
            collapse_threshold: 0.99,
            collapse_window: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub track: Track,
    pub phases: Vec<Phase>,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::base_lr")]
    pub base_lr: f64,
    #[serde(default = "defaults::lr_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "defaults::lr_decay_every_epochs")]
    pub lr_decay_every_epochs: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "defaults::patch_size")]
    pub patch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub gan: GanConfig,
    /// Generator checkpoint to start from, e.g. the L1 result for the GAN track.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
}

mod defaults {
    pub fn batch_size() -> usize {
        8
    }
    pub fn base_lr() -> f64 {
        1e-4
    }
    pub fn lr_decay_factor() -> f64 {
        0.5
    }
    pub fn lr_decay_every_epochs() -> usize {
        100
    }
    pub fn patch_size() -> usize {
        64
    }
}

impl TrainPlan {
    /// A single-phase plan with the default optimizer schedule.
    pub fn objective(loss: PhaseLoss, epochs: usize) -> Self {
        TrainPlan {
            track: Track::Objective,
            phases: vec![Phase { loss, epochs }],
            batch_size: defaults::batch_size(),
            base_lr: defaults::base_lr(),
            lr_decay_factor: defaults::lr_decay_factor(),
            lr_decay_every_epochs: defaults::lr_decay_every_epochs(),
            adam: AdamConfig::default(),
            patch_size: defaults::patch_size(),
            seed: 0,
            model: ModelConfig::default(),
            gan: GanConfig::default(),
            init_from: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor must lie in (0, 1]"));
        }
        if self.lr_decay_every_epochs == 0 {
            return Err(Error::config("lr_decay_every_epochs must be positive"));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config("base_lr must be finite and non-negative"));
        }
        if self.phases.is_empty() {
            return Err(Error::config("plan has no phases"));
        }
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be positive"));
        }
        self.model.validate()?;
        for p in &self.phases {
            let ok = match self.track {
                Track::Objective => matches!(p.loss, PhaseLoss::L1 | PhaseLoss::Mse),
                Track::Gan => matches!(p.loss, PhaseLoss::L1 | PhaseLoss::Hybrid),
            };
            if !ok {
                return Err(Error::config(format!(
                    "{:?} track cannot run a `{}` phase",
                    self.track,
                    p.loss.name()
                )));
            }
        }
        if self.phases.iter().any(|p| p.loss == PhaseLoss::Hybrid) {
            let g = &self.gan;
            g.discriminator.validate()?;
            g.weights.validate()?;
            if g.discriminator.patch_size != self.patch_size {
                return Err(Error::config(format!(
                    "discriminator patch size {} differs from training crops of {}",
                    g.discriminator.patch_size, self.patch_size
                )));
            }
            if g.d_steps_per_g == 0 {
                return Err(Error::config("d_steps_per_g must be at least 1"));
            }
            if g.weights.w_perc > 0.0 && g.extractor.is_none() {
                return Err(Error::config("perceptual weight set but no extractor configured"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: TrainPlan = toml::from_str(text).map_err(|e| Error::parse("training plan", e))?;
        plan.validate()?;
        Ok(plan)
    }

    /// Loads a plan; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &mut plan.init_from {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(x) = &mut plan.gan.extractor {
            if x.weights.is_relative() {
                x.weights = base.join(&x.weights);
            }
        }
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// Phase index and loss for a global epoch.
    pub fn phase_at(&self, epoch: usize) -> Option<(usize, PhaseLoss)> {
        let mut end = 0;
        for (i, p) in self.phases.iter().enumerate() {
            end += p.epochs;
            if epoch < end {
                return Some((i, p.loss));
            }
        }
        None
    }
}

/// `base_lr · factor^⌊epoch / every⌋`, with epochs counted across phases.
pub fn lr_at(epoch: usize, plan: &TrainPlan) -> f64 {
    let k = epoch / plan.lr_decay_every_epochs;
    plan.base_lr * plan.lr_decay_factor.powi(k.min(i32::MAX as usize) as i32)
}
