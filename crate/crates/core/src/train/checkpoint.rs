//! Training checkpoints in the shared named-tensor archive format.
//!
//! Sections: `generator.`, `discriminator.`, and `opt.{g,d}.{m,v}.` for the
//! optimizer moments. The metadata carries the configs, the fingerprint,
//! progress counters and the sampling RNG position.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adversarial::DiscriminatorConfig;
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParameterSet;
use crate::train::adam::AdamState;
use crate::train::plan::AdamConfig;
use crate::train::step::{DiscriminatorState, GeneratorState};

/// Where training stands after a completed epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs_done: usize,
    pub global_step: u64,
    /// Hex of the 32-byte ChaCha seed.
    pub rng_seed: String,
    /// Word position of the stream, as a decimal string (it is a u128).
    pub rng_word_pos: String,
    /// Consecutive steps with mean `D(real)` above the collapse threshold.
    pub collapse_run: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub generator: GeneratorState,
    pub discriminator: Option<DiscriminatorState>,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    step: u64,
    config: AdamConfig,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let g = &self.generator;
        let mut meta = json!({
            "format": "msgdn-archive",
            "version": 1,
            "kind": "checkpoint",
            "model": g.config,
            "fingerprint": g.config.fingerprint(),
            "progress": self.progress,
            "opt_g": OptMeta { step: g.opt.step, config: g.opt.config },
        });
        let mut a = Archive::new(serde_json::Value::Null);
        a.insert_section("generator", g.params.iter());
        a.insert_section("opt.g.m", g.opt.m.iter());
        a.insert_section("opt.g.v", g.opt.v.iter());
        if let Some(d) = &self.discriminator {
            meta["discriminator"] = json!(d.config);
            meta["opt_d"] = json!(OptMeta {
                step: d.opt.step,
                config: d.opt.config
            });
            a.insert_section("discriminator", d.params.iter());
            a.insert_section("opt.d.m", d.opt.m.iter());
            a.insert_section("opt.d.v", d.opt.v.iter());
        }
        a.metadata = meta;
        a
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, path)
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Archive {
            path: path.to_path_buf(),
            reason,
        };
        let meta = &a.metadata;
        if meta["kind"] != "checkpoint" {
            return Err(bad("not a training checkpoint".into()));
        }
        let config: ModelConfig =
            serde_json::from_value(meta["model"].clone()).map_err(|e| bad(format!("model config: {e}")))?;
        if meta["fingerprint"].as_str() != Some(config.fingerprint().as_str()) {
            return Err(bad(format!(
                "config fingerprint {} does not match this build ({}); refusing to load",
                meta["fingerprint"],
                config.fingerprint()
            )));
        }
        let progress: Progress =
            serde_json::from_value(meta["progress"].clone()).map_err(|e| bad(format!("progress: {e}")))?;
        let opt = |key: &str, prefix: &str, params: &ParameterSet| -> Result<AdamState> {
            let m: OptMeta = serde_json::from_value(meta[key].clone()).map_err(|e| bad(format!("{key}: {e}")))?;
            let state = AdamState {
                config: m.config,
                step: m.step,
                m: ParameterSet::from_map(a.section(&format!("{prefix}.m"))),
                v: ParameterSet::from_map(a.section(&format!("{prefix}.v"))),
            };
            let shapes = params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
            state.m.check_shapes(&shapes).map_err(|e| bad(e.to_string()))?;
            state.v.check_shapes(&shapes).map_err(|e| bad(e.to_string()))?;
            Ok(state)
        };
        let params = ParameterSet::from_map(a.section("generator"));
        params.check_shapes(&config.param_shapes()).map_err(|e| bad(e.to_string()))?;
        let gopt = opt("opt_g", "opt.g", &params)?;
        let generator = GeneratorState {
            config,
            params,
            opt: gopt,
        };
        let discriminator = if meta.get("discriminator").is_some() {
            let dc: DiscriminatorConfig = serde_json::from_value(meta["discriminator"].clone())
                .map_err(|e| bad(format!("discriminator config: {e}")))?;
            let dp = ParameterSet::from_map(a.section("discriminator"));
            dp.check_shapes(&dc.param_shapes()).map_err(|e| bad(e.to_string()))?;
            let dopt = opt("opt_d", "opt.d", &dp)?;
            Some(DiscriminatorState {
                config: dc,
                params: dp,
                opt: dopt,
            })
        } else {
            None
        };
        Ok(Checkpoint {
            generator,
            discriminator,
            progress,
        })
    }
}
