//! Multi-phase training runs with per-epoch checkpoints and resume.
//!
//! Output layout:
//! - `plan.toml`: the plan the run was started with
//! - `metrics.jsonl`: one JSON object per generator step
//! - `checkpoints/epoch-NNNNN.safetensors`: state after each epoch
//! - `model.safetensors`: final generator, loadable by `infer`

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::manifest::{DatasetManifest, LoadedPair};
use crate::data::patch::{crop_window, sample_window};
use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::model::{InitOptions, Msgdn};
use crate::tensor::Tensor;
use crate::train::checkpoint::{Checkpoint, Progress};
use crate::train::plan::{lr_at, PhaseLoss, TrainPlan};
use crate::train::step::{train_step_gan, train_step_objective, Batch, DiscriminatorState, GeneratorState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MODEL_FILE: &str = "model.safetensors";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch-{epoch:05}.safetensors"))
}

/// Epoch checkpoints in `out_dir`, oldest first.
pub fn list_checkpoints(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for e in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = e.map_err(|e| Error::io(&dir, e))?.path();
        let name = p.file_name().unwrap_or_default().to_string_lossy();
        if name.starts_with("epoch-") && name.ends_with(".safetensors") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Trains on every pair of `manifest`.
pub fn run(plan: &TrainPlan, manifest: &DatasetManifest, out_dir: &Path, resume: bool) -> Result<Checkpoint> {
    if manifest.pairs.is_empty() {
        return Err(Error::config("manifest has no pairs"));
    }
    let pairs = manifest.load_images()?;
    run_on_pairs(plan, &pairs, out_dir, resume)
}

pub fn run_on_pairs(plan: &TrainPlan, pairs: &[LoadedPair], out_dir: &Path, resume: bool) -> Result<Checkpoint> {
    plan.validate()?;
    if pairs.is_empty() {
        return Err(Error::config("no training pairs"));
    }
    for p in pairs {
        if p.pair.width < plan.patch_size || p.pair.height < plan.patch_size {
            return Err(Error::shape(format!(
                "{} is {}x{}, smaller than the {} patch",
                p.pair.original.display(),
                p.pair.width,
                p.pair.height,
                plan.patch_size
            )));
        }
    }
    std::fs::create_dir_all(out_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let existing = list_checkpoints(out_dir)?;

    let needs_disc = plan.phases.iter().any(|p| p.loss == PhaseLoss::Hybrid);
    let (mut state, mut rng) = if resume && !existing.is_empty() {
        let last = existing.last().unwrap();
        log::info!("resuming from {}", last.display());
        let ck = Checkpoint::load(last)?;
        if ck.generator.config != plan.model {
            return Err(Error::config("checkpoint model config differs from the plan"));
        }
        truncate_metrics(&metrics_path, ck.progress.global_step)?;
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&ck.progress.rng_seed, &mut seed)
            .map_err(|e| Error::parse("checkpoint rng seed", e))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(
            ck.progress
                .rng_word_pos
                .parse()
                .map_err(|e| Error::parse("checkpoint rng position", e))?,
        );
        (ck, rng)
    } else {
        if !existing.is_empty() {
            return Err(Error::config(format!(
                "{} already holds a run; pass resume to continue it",
                out_dir.display()
            )));
        }
        let _ = std::fs::remove_file(&metrics_path);
        std::fs::write(out_dir.join("plan.toml"), plan.to_toml()).map_err(|e| Error::io(out_dir, e))?;
        (fresh_state(plan, needs_disc)?, ChaCha8Rng::seed_from_u64(plan.seed))
    };

    let extractor = match (&plan.gan.extractor, needs_disc && plan.gan.weights.w_perc > 0.0) {
        (Some(spec), true) => Some(FeatureExtractor::load(spec)?),
        _ => None,
    };

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    for epoch in state.progress.epochs_done..plan.total_epochs() {
        let (phase, loss) = plan.phase_at(epoch).expect("epoch within plan");
        let lr = lr_at(epoch, plan);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let windows = order
            .iter()
            .map(|&i| sample_window(pairs[i].pair.height, pairs[i].pair.width, plan.patch_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;

        for (ids, wins) in order.chunks(plan.batch_size).zip(windows.chunks(plan.batch_size)) {
            let mut orig = Vec::with_capacity(ids.len());
            let mut comp = Vec::with_capacity(ids.len());
            for (&i, &w) in ids.iter().zip(wins) {
                orig.push(crop_window(&pairs[i].original, w)?);
                comp.push(crop_window(&pairs[i].compressed, w)?);
            }
            let batch = Batch::new(Tensor::stack(&orig)?, Tensor::stack(&comp)?, ids.to_vec())?;
            let metrics = match loss {
                PhaseLoss::L1 | PhaseLoss::Mse => train_step_objective(&mut state.generator, &batch, loss, lr)?,
                PhaseLoss::Hybrid => {
                    let disc = state.discriminator.as_mut().expect("discriminator initialised");
                    train_step_gan(
                        &mut state.generator,
                        disc,
                        &batch,
                        &plan.gan.weights,
                        extractor.as_ref(),
                        lr,
                        lr * plan.gan.d_lr_scale,
                        plan.gan.d_steps_per_g,
                    )?
                }
            };
            state.progress.global_step += 1;
            let mut line = serde_json::to_value(&metrics).expect("metrics serialize");
            line["step"] = json!(state.progress.global_step);
            line["epoch"] = json!(epoch);
            line["phase"] = json!(phase);
            line["lr"] = json!(lr);
            line["batch"] = json!(batch.ids);
            if let Some(dr) = metrics.d_real {
                if dr > plan.gan.collapse_threshold {
                    state.progress.collapse_run += 1;
                } else {
                    state.progress.collapse_run = 0;
                }
                let collapsed = state.progress.collapse_run >= plan.gan.collapse_window;
                if state.progress.collapse_run == plan.gan.collapse_window {
                    log::warn!(
                        "discriminator collapse: mean D(real) above {} for {} steps",
                        plan.gan.collapse_threshold,
                        plan.gan.collapse_window
                    );
                }
                line["d_collapse"] = json!(collapsed);
            }
            writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        }
        log.flush().map_err(|e| Error::io(&metrics_path, e))?;

        state.progress.epochs_done = epoch + 1;
        state.progress.rng_seed = hex::encode(rng.get_seed());
        state.progress.rng_word_pos = rng.get_word_pos().to_string();
        state.save(&checkpoint_path(out_dir, epoch + 1))?;
        log::info!("epoch {} done ({} steps)", epoch + 1, state.progress.global_step);
    }

    Msgdn::new(state.generator.config.clone(), state.generator.params.clone())?.save(&out_dir.join(MODEL_FILE))?;
    Ok(state)
}

fn fresh_state(plan: &TrainPlan, needs_disc: bool) -> Result<Checkpoint> {
    let params = match &plan.init_from {
        Some(path) => {
            let net = Msgdn::load(path)?;
            if net.config != plan.model {
                return Err(Error::config(format!(
                    "{} was trained with a different model config",
                    path.display()
                )));
            }
            net.params
        }
        None => plan.model.init_params(plan.seed, InitOptions::default())?,
    };
    let generator = GeneratorState::new(plan.model.clone(), params, plan.adam)?;
    let discriminator = if needs_disc {
        let dc = plan.gan.discriminator.clone();
        let dp = dc.init_params(plan.seed.wrapping_add(1))?;
        Some(DiscriminatorState::new(dc, dp, plan.adam)?)
    } else {
        None
    };
    let rng = ChaCha8Rng::seed_from_u64(plan.seed);
    Ok(Checkpoint {
        generator,
        discriminator,
        progress: Progress {
            epochs_done: 0,
            global_step: 0,
            rng_seed: hex::encode(rng.get_seed()),
            rng_word_pos: "0".into(),
            collapse_run: 0,
        },
    })
}

/// Drops log lines written after the checkpoint being resumed.
fn truncate_metrics(path: &Path, keep_steps: u64) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::parse("metrics log", e))?;
        if v["step"].as_u64().is_some_and(|s| s <= keep_steps) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}
