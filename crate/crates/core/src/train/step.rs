//! Single optimizer steps for both training tracks.

use serde::{Deserialize, Serialize};

use crate::adversarial::{discriminator_forward, discriminator_loss_op, relativistic_d, DiscriminatorConfig, LogitBatch};
use crate::autodiff::{scalar, Eager, Ops, Tape};
use crate::error::{Error, Result};
use crate::losses::{hybrid_loss_op, perceptual_loss_op, FeatureExtractor, HybridLossWeights};
use crate::model::{msgdn_forward, ModelConfig};
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::train::adam::{grad_norm, AdamState};
use crate::train::plan::{AdamConfig, PhaseLoss};

/// Stacked patches `(n, 3, p, p)` with the manifest indices they came from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub original: Tensor,
    pub compressed: Tensor,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn new(original: Tensor, compressed: Tensor, ids: Vec<usize>) -> Result<Self> {
        original.expect_same_shape(&compressed)?;
        let (n, _, _, _) = original.dims4()?;
        if n != ids.len() {
            return Err(Error::shape(format!("batch of {n} images carries {} ids", ids.len())));
        }
        Ok(Batch {
            original,
            compressed,
            ids,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorState {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub opt: AdamState,
}

impl GeneratorState {
    pub fn new(config: ModelConfig, params: ParameterSet, adam: AdamConfig) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config.param_shapes())?;
        let opt = AdamState::new(adam, &params);
        Ok(GeneratorState { config, params, opt })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorState {
    pub config: DiscriminatorConfig,
    pub params: ParameterSet,
    pub opt: AdamState,
}

impl DiscriminatorState {
    pub fn new(config: DiscriminatorConfig, params: ParameterSet, adam: AdamConfig) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config.param_shapes())?;
        let opt = AdamState::new(adam, &params);
        Ok(DiscriminatorState { config, params, opt })
    }
}

/// Metrics of one generator step (and the discriminator steps before it).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss_name: String,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversarial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_grad_norm: Option<f64>,
    /// Mean `D(x_r, x_f)` over the real patches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_real: Option<f64>,
    /// Mean `D(x_f, x_r)` over the generated patches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_fake: Option<f64>,
}

fn check_finite(value: f64, what: &str, batch: &Batch, detail: &StepMetrics) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite(format!(
        "{what} = {value} on batch {:?}; breakdown {}",
        batch.ids,
        serde_json::to_string(detail).unwrap_or_default()
    )))
}

/// One generator update with the L1 or MSE objective.
pub fn train_step_objective(gen: &mut GeneratorState, batch: &Batch, loss: PhaseLoss, lr: f64) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    tape.watch(&gen.params);
    let pred = msgdn_forward(&mut tape, &batch.compressed, &gen.params, &gen.config)?;
    let target = tape.constant(batch.original.clone());
    let l = match loss {
        PhaseLoss::L1 => tape.l1(&pred, &target)?,
        PhaseLoss::Mse => tape.mse(&pred, &target)?,
        PhaseLoss::Hybrid => return Err(Error::config("objective step cannot run the hybrid loss")),
    };
    let value = scalar(&tape, &l);
    let mut m = StepMetrics {
        loss_name: loss.name().into(),
        loss: value,
        ..Default::default()
    };
    check_finite(value, "loss", batch, &m)?;
    let grads = tape.backward(l)?.for_set(&gen.params);
    m.grad_norm = grad_norm(&grads);
    check_finite(m.grad_norm, "gradient norm", batch, &m)?;
    gen.opt.update(&mut gen.params, &grads, lr)?;
    Ok(m)
}

/// Discriminator step on real crops against detached generator outputs,
/// then one generator step on the hybrid objective.
pub fn train_step_gan(
    gen: &mut GeneratorState,
    disc: &mut DiscriminatorState,
    batch: &Batch,
    weights: &HybridLossWeights,
    extractor: Option<&FeatureExtractor>,
    lr_g: f64,
    lr_d: f64,
    d_steps: usize,
) -> Result<StepMetrics> {
    weights.validate()?;
    let mut m = StepMetrics {
        loss_name: "hybrid".into(),
        ..Default::default()
    };

    let fake = {
        let mut eager = Eager::new();
        (*msgdn_forward(&mut eager, &batch.compressed, &gen.params, &gen.config)?).clone()
    };
    for _ in 0..d_steps.max(1) {
        let mut tape = Tape::new();
        tape.watch(&disc.params);
        let real_v = tape.constant(batch.original.clone());
        let fake_v = tape.constant(fake.clone());
        let c_real = discriminator_forward(&mut tape, &real_v, &disc.params, &disc.config)?;
        let c_fake = discriminator_forward(&mut tape, &fake_v, &disc.params, &disc.config)?;
        let real = LogitBatch::real(tape.value(&c_real).data().to_vec())?;
        let fakes = LogitBatch::fake(tape.value(&c_fake).data().to_vec())?;
        let d_real = relativistic_d(&real, &fakes);
        let d_fake = relativistic_d(&fakes, &real);
        m.d_real = Some(d_real.iter().sum::<f64>() / d_real.len() as f64);
        m.d_fake = Some(d_fake.iter().sum::<f64>() / d_fake.len() as f64);
        let l = discriminator_loss_op(&mut tape, &c_real, &c_fake)?;
        let value = scalar(&tape, &l);
        m.d_loss = Some(value);
        check_finite(value, "discriminator loss", batch, &m)?;
        let grads = tape.backward(l)?.for_set(&disc.params);
        let norm = grad_norm(&grads);
        m.d_grad_norm = Some(norm);
        check_finite(norm, "discriminator gradient norm", batch, &m)?;
        disc.opt.update(&mut disc.params, &grads, lr_d)?;
    }

    let mut tape = Tape::new();
    tape.watch(&gen.params);
    let pred = msgdn_forward(&mut tape, &batch.compressed, &gen.params, &gen.config)?;
    let target = tape.constant(batch.original.clone());
    let l1 = tape.l1(&pred, &target)?;
    m.l1 = Some(scalar(&tape, &l1));
    let (c_real, c_fake) = if weights.w_adv != 0.0 {
        let real_v = tape.constant(batch.original.clone());
        let c_real = discriminator_forward(&mut tape, &real_v, &disc.params, &disc.config)?;
        let c_fake = discriminator_forward(&mut tape, &pred, &disc.params, &disc.config)?;
        let adv = crate::adversarial::generator_adv_loss_op(&mut tape, &c_real, &c_fake)?;
        m.adversarial = Some(scalar(&tape, &adv));
        (c_real, c_fake)
    } else {
        (l1.clone(), l1.clone())
    };
    if weights.w_perc != 0.0 {
        let ex = extractor.ok_or_else(|| Error::config("perceptual weight set but no extractor loaded"))?;
        let p = perceptual_loss_op(&mut tape, &pred, &batch.original, ex)?;
        m.perceptual = Some(scalar(&tape, &p));
    }
    let total = hybrid_loss_op(&mut tape, &pred, &batch.original, &c_real, &c_fake, weights, extractor)?;
    m.loss = scalar(&tape, &total);
    check_finite(m.loss, "generator loss", batch, &m)?;
    let grads = tape.backward(total)?.for_set(&gen.params);
    m.grad_norm = grad_norm(&grads);
    check_finite(m.grad_norm, "gradient norm", batch, &m)?;
    gen.opt.update(&mut gen.params, &grads, lr_g)?;
    Ok(m)
}
