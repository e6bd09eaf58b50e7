//! Reconstruction, perceptual and hybrid objectives, plus PSNR.
//!
//! All losses operate on `[0, 1]` images.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adversarial::{generator_adv_loss, generator_adv_loss_op, LogitBatch};
use crate::archive::Archive;
use crate::autodiff::{Eager, Ops};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::kernels::ConvGeom;
use crate::tensor::Tensor;

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(pred.zip_map(target, |a, b| (a - b).abs())?.mean())
}

/// Mean squared difference.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(pred.zip_map(target, |a, b| (a - b) * (a - b))?.mean())
}

/// `10 log10(peak² / mse)`; `+inf` for identical signals.
pub fn psnr(mse: f64, peak: f64) -> Result<f64> {
    if !(mse >= 0.0) {
        return Err(Error::config(format!("mse must be non-negative, got {mse}")));
    }
    if !(peak > 0.0) {
        return Err(Error::config(format!("peak must be positive, got {peak}")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Weights of the hybrid generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridLossWeights {
    pub w_l1: f64,
    pub w_adv: f64,
    pub w_perc: f64,
}

impl Default for HybridLossWeights {
    fn default() -> Self {
        HybridLossWeights {
            w_l1: 1.0,
            w_adv: 0.01,
            w_perc: 0.0001,
        }
    }
}

impl HybridLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_l1, self.w_adv, self.w_perc]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::config("hybrid loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Components of the hybrid loss and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l1: f64, adversarial: f64, perceptual: f64, w: &HybridLossWeights) -> Self {
        LossBreakdown {
            l1,
            adversarial,
            perceptual,
            total: w.w_l1 * l1 + w.w_adv * adversarial + w.w_perc * perceptual,
        }
    }
}

/// Layer plan of the VGG-19 feature stack: conv names, with `None` for 2×2 pooling.
const VGG19_LAYOUT: &[Option<&str>] = &[
    Some("conv1_1"),
    Some("conv1_2"),
    None,
    Some("conv2_1"),
    Some("conv2_2"),
    None,
    Some("conv3_1"),
    Some("conv3_2"),
    Some("conv3_3"),
    Some("conv3_4"),
    None,
    Some("conv4_1"),
    Some("conv4_2"),
    Some("conv4_3"),
    Some("conv4_4"),
    None,
    Some("conv5_1"),
    Some("conv5_2"),
    Some("conv5_3"),
    Some("conv5_4"),
];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Names of the VGG-19 conv layers up to and including `tap`.
pub fn vgg19_layers_until(tap: &str) -> Result<Vec<&'static str>> {
    let convs: Vec<&'static str> = VGG19_LAYOUT.iter().flatten().copied().collect();
    let end = convs
        .iter()
        .position(|c| *c == tap)
        .ok_or_else(|| Error::config(format!("VGG-19 has no conv layer `{tap}`")))?;
    Ok(convs[..=end].to_vec())
}

/// Which pretrained classifier features the perceptual loss compares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureExtractorSpec {
    #[serde(default = "default_backbone")]
    pub backbone: String,
    /// Conv layer whose pre-activation output is compared.
    #[serde(default = "default_tap")]
    pub tap_layer: String,
    pub weights: PathBuf,
}

fn default_backbone() -> String {
    "vgg19".into()
}

fn default_tap() -> String {
    "conv5_4".into()
}

impl FeatureExtractorSpec {
    pub fn vgg19(weights: impl Into<PathBuf>) -> Self {
        FeatureExtractorSpec {
            backbone: default_backbone(),
            tap_layer: default_tap(),
            weights: weights.into(),
        }
    }
}

/// VGG-19 feature stack truncated at the tap layer.
///
/// Weights come from a named-tensor archive with entries
/// `features.<conv>.weight` / `features.<conv>.bias`; channel widths are read
/// from the archive, so narrowed variants load the same way.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    tap: String,
    layers: Vec<Option<&'static str>>,
    params: ParameterSet,
}

impl FeatureExtractor {
    pub fn load(spec: &FeatureExtractorSpec) -> Result<Self> {
        if spec.backbone != "vgg19" {
            return Err(Error::config(format!(
                "unsupported perceptual backbone `{}`",
                spec.backbone
            )));
        }
        if !spec.weights.is_file() {
            return Err(Error::Archive {
                path: spec.weights.clone(),
                reason: "feature extractor weights not found".into(),
            });
        }
        let archive = Archive::load(&spec.weights)?;
        let params = ParameterSet::from_map(archive.section("features"));
        Self::from_params(params, &spec.tap_layer).map_err(|e| Error::Archive {
            path: spec.weights.clone(),
            reason: e.to_string(),
        })
    }

    pub fn from_params(params: ParameterSet, tap: &str) -> Result<Self> {
        let needed = vgg19_layers_until(tap)?;
        let mut layers = Vec::new();
        for entry in VGG19_LAYOUT {
            layers.push(*entry);
            if *entry == Some(tap) {
                break;
            }
        }
        let mut cin = 3;
        for name in &needed {
            let w = params.get(&format!("{name}.weight"))?;
            let b = params.get(&format!("{name}.bias"))?;
            let s = w.shape();
            if s.len() != 4 || s[1] != cin || s[2] != 3 || s[3] != 3 || b.shape() != [s[0]] {
                return Err(Error::config(format!(
                    "`{name}` has weight {:?} / bias {:?}, expected (_, {cin}, 3, 3)",
                    s,
                    b.shape()
                )));
            }
            cin = s[0];
        }
        Ok(FeatureExtractor {
            tap: tap.to_string(),
            layers,
            params,
        })
    }

    /// Saves in the format [`FeatureExtractor::load`] reads.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(json!({
            "format": "msgdn-archive",
            "version": 1,
            "kind": "feature-extractor",
            "backbone": "vgg19",
        }));
        a.insert_section("features", self.params.iter());
        a.save(path)
    }

    /// Randomly initialised extractor with the given per-block widths. For
    /// tests and smoke runs only; [`FeatureExtractor::load`] never does this.
    pub fn random(widths: [usize; 5], tap: &str, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut cin = 3;
        for name in vgg19_layers_until(tap)? {
            let block = name.as_bytes()[4] - b'1';
            let cout = widths[block as usize];
            let normal = Normal::new(0.0, (2.0 / (cin * 9) as f64).sqrt())
                .map_err(|e| Error::config(e.to_string()))?;
            let w = Tensor::from_fn([cout, cin, 3, 3], |_| normal.sample(&mut rng));
            params.insert(format!("{name}.weight"), w)?;
            params.insert(format!("{name}.bias"), Tensor::from_fn([cout], |_| 0.01 * normal.sample(&mut rng)))?;
            cin = cout;
        }
        Self::from_params(params, tap)
    }

    pub fn tap(&self) -> &str {
        &self.tap
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Tap-layer features (pre-activation) of `[0, 1]` RGB images.
    pub fn features<O: Ops>(&self, ops: &mut O, images: &O::V) -> Result<O::V> {
        let (_, c, _, _) = ops.value(images).dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("perceptual features need RGB input, got {c} channels")));
        }
        let scale: Vec<f64> = IMAGENET_STD.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| -m / s).collect();
        let mut x = ops.channel_affine(images, &scale, &shift)?;
        for layer in &self.layers {
            match layer {
                None => x = ops.max_pool2x2(&x)?,
                Some(name) => {
                    let w = ops.param(&self.params, &format!("{name}.weight"))?;
                    let b = ops.param(&self.params, &format!("{name}.bias"))?;
                    x = ops.conv2d(&x, &w, Some(&b), ConvGeom::SAME3)?;
                    if *name == self.tap {
                        return Ok(x);
                    }
                    x = ops.relu(&x);
                }
            }
        }
        Err(Error::config(format!("tap layer `{}` not reached", self.tap)))
    }
}

/// Mean squared distance between tap features of `pred` and `target`.
pub fn perceptual_loss(pred: &Tensor, target: &Tensor, extractor: &FeatureExtractor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let mut ops = Eager::new();
    let p = ops.constant(pred.clone());
    let t = ops.constant(target.clone());
    let fp = extractor.features(&mut ops, &p)?;
    let ft = extractor.features(&mut ops, &t)?;
    Ok(mse_loss(&fp, &ft)?)
}

/// Differentiable perceptual loss; the target side is a constant.
pub fn perceptual_loss_op<O: Ops>(
    ops: &mut O,
    pred: &O::V,
    target: &Tensor,
    extractor: &FeatureExtractor,
) -> Result<O::V> {
    ops.value(pred).expect_same_shape(target)?;
    let mut eager = Eager::new();
    let tv = eager.constant(target.clone());
    let target_features = extractor.features(&mut eager, &tv)?;
    let fp = extractor.features(ops, pred)?;
    let ft = ops.constant((*target_features).clone());
    ops.mse(&fp, &ft)
}

/// Weighted hybrid objective with its breakdown.
pub fn hybrid_loss(
    pred: &Tensor,
    target: &Tensor,
    c_real: &LogitBatch,
    c_fake: &LogitBatch,
    weights: &HybridLossWeights,
    extractor: &FeatureExtractor,
) -> Result<(f64, LossBreakdown)> {
    weights.validate()?;
    let l1 = l1_loss(pred, target)?;
    let adv = generator_adv_loss(c_real, c_fake);
    let perc = perceptual_loss(pred, target, extractor)?;
    let b = LossBreakdown::combine(l1, adv, perc, weights);
    Ok((b.total, b))
}

/// Differentiable hybrid objective. `c_real` and `c_fake` are discriminator
/// logits of shape `(n, 1)`; only `c_fake` should depend on `pred`.
pub fn hybrid_loss_op<O: Ops>(
    ops: &mut O,
    pred: &O::V,
    target: &Tensor,
    c_real: &O::V,
    c_fake: &O::V,
    weights: &HybridLossWeights,
    extractor: Option<&FeatureExtractor>,
) -> Result<O::V> {
    weights.validate()?;
    let t = ops.constant(target.clone());
    let mut terms = vec![(ops.l1(pred, &t)?, weights.w_l1)];
    if weights.w_adv != 0.0 {
        terms.push((generator_adv_loss_op(ops, c_real, c_fake)?, weights.w_adv));
    }
    if weights.w_perc != 0.0 {
        let extractor = extractor
            .ok_or_else(|| Error::config("perceptual weight is non-zero but no feature extractor is loaded"))?;
        terms.push((perceptual_loss_op(ops, pred, target, extractor)?, weights.w_perc));
    }
    ops.weighted_sum(&terms)
}

/// Shapes of a VGG-19 prefix with the given block widths (test helper for
/// building extractor archives).
pub fn vgg19_param_shapes(widths: [usize; 5], tap: &str) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out = BTreeMap::new();
    let mut cin = 3;
    for name in vgg19_layers_until(tap)? {
        let cout = widths[(name.as_bytes()[4] - b'1') as usize];
        out.insert(format!("{name}.weight"), vec![cout, cin, 3, 3]);
        out.insert(format!("{name}.bias"), vec![cout]);
        cin = cout;
    }
    Ok(out)
}
