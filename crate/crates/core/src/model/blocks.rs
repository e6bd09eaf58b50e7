use crate::autodiff::Ops;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::kernels::ConvGeom;

fn conv<O: Ops>(ops: &mut O, x: &O::V, params: &ParameterSet, name: &str, g: ConvGeom) -> Result<O::V> {
    let w = ops.param(params, &format!("{name}.weight"))?;
    let b = ops.param(params, &format!("{name}.bias"))?;
    ops.conv2d(x, &w, Some(&b), g)
}

fn same(k: usize) -> ConvGeom {
    ConvGeom { stride: 1, pad: k / 2 }
}

fn channels<O: Ops>(ops: &O, x: &O::V) -> Result<usize> {
    Ok(ops.value(x).dims4()?.1)
}

fn out_channels(params: &ParameterSet, name: &str) -> Result<usize> {
    Ok(params.get(&format!("{name}.weight"))?.shape()[0])
}

/// Residual dense block: `convs_per_rdb` densely connected conv+ReLU layers
/// (layer `i` sees `x` and all earlier layer outputs), a 1×1 local fusion back
/// to the block width, and a local residual.
pub fn rdb_forward<O: Ops>(
    ops: &mut O,
    x: &O::V,
    params: &ParameterSet,
    prefix: &str,
    growth_rate: usize,
    convs_per_rdb: usize,
) -> Result<O::V> {
    let c = channels(ops, x)?;
    let nominal = out_channels(params, &format!("{prefix}.fuse"))?;
    if c != nominal {
        return Err(Error::config(format!(
            "{prefix}: input has {c} channels, block width is {nominal}"
        )));
    }
    let mut features = vec![x.clone()];
    for i in 0..convs_per_rdb {
        let name = format!("{prefix}.conv.{i}");
        let w = params.get(&format!("{name}.weight"))?;
        if w.shape()[0] != growth_rate || w.shape()[1] != c + i * growth_rate {
            return Err(Error::config(format!(
                "{name}: weight shape {:?} does not match growth rate {growth_rate}",
                w.shape()
            )));
        }
        let k = w.shape()[2];
        let input = if features.len() == 1 {
            x.clone()
        } else {
            ops.concat_channels(&features)?
        };
        let y = conv(ops, &input, params, &name, same(k))?;
        features.push(ops.relu(&y));
    }
    let all = ops.concat_channels(&features)?;
    let fused = conv(ops, &all, params, &format!("{prefix}.fuse"), ConvGeom::POINTWISE)?;
    ops.add(&fused, x)
}

/// Grouped residual dense block: `rdbs` RDBs in sequence, their outputs
/// concatenated and reduced by a 1×1 conv, plus a block-level residual.
pub fn grdb_forward<O: Ops>(
    ops: &mut O,
    x: &O::V,
    params: &ParameterSet,
    prefix: &str,
    rdbs: usize,
    growth_rate: usize,
    convs_per_rdb: usize,
) -> Result<O::V> {
    let c = channels(ops, x)?;
    let nominal = out_channels(params, &format!("{prefix}.fuse"))?;
    if c != nominal {
        return Err(Error::config(format!(
            "{prefix}: input has {c} channels, block width is {nominal}"
        )));
    }
    let mut outs = Vec::with_capacity(rdbs);
    let mut h = x.clone();
    for r in 0..rdbs {
        h = rdb_forward(ops, &h, params, &format!("{prefix}.rdb.{r}"), growth_rate, convs_per_rdb)?;
        outs.push(h.clone());
    }
    let cat = ops.concat_channels(&outs)?;
    let fused = conv(ops, &cat, params, &format!("{prefix}.fuse"), ConvGeom::POINTWISE)?;
    ops.add(&fused, x)
}

/// Stride-2 convolution halving the spatial size.
pub fn downsample<O: Ops>(ops: &mut O, x: &O::V, params: &ParameterSet, prefix: &str) -> Result<O::V> {
    let (_, c, h, w) = ops.value(x).dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Other(format!(
            "internal error: downsampling a {h}x{w} map; inputs must be padded to the scale multiple"
        )));
    }
    let wt = params.get(&format!("{prefix}.weight"))?;
    if wt.shape()[1] != c {
        return Err(Error::config(format!(
            "{prefix}: input has {c} channels, expected {}",
            wt.shape()[1]
        )));
    }
    let k = wt.shape()[2];
    conv(ops, x, params, prefix, ConvGeom { stride: 2, pad: k / 2 })
}

/// How attention maps are laid out over a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionPolicy {
    /// Largest admissible number of positions per attention map.
    pub cap: usize,
    /// `None` attends over the whole map; `Some(t)` within `t×t` tiles.
    pub tile: Option<usize>,
}

impl AttentionPolicy {
    pub fn global(cap: usize) -> Self {
        AttentionPolicy { cap, tile: None }
    }

    fn positions(&self, h: usize, w: usize) -> usize {
        match self.tile {
            None => h * w,
            Some(t) => t.min(h) * t.min(w),
        }
    }
}

/// Embedded-Gaussian non-local block with residual connection:
/// `y = x + W_z · (softmax(θ(x)ᵀ φ(x)) · g(x))`.
pub fn non_local<O: Ops>(
    ops: &mut O,
    x: &O::V,
    params: &ParameterSet,
    prefix: &str,
    policy: AttentionPolicy,
) -> Result<O::V> {
    let (_, _, h, w) = ops.value(x).dims4()?;
    let positions = policy.positions(h, w);
    if positions > policy.cap {
        return Err(Error::AttentionTooLarge {
            positions,
            cap: policy.cap,
        });
    }
    let theta = conv(ops, x, params, &format!("{prefix}.theta"), ConvGeom::POINTWISE)?;
    let phi = conv(ops, x, params, &format!("{prefix}.phi"), ConvGeom::POINTWISE)?;
    let g = conv(ops, x, params, &format!("{prefix}.g"), ConvGeom::POINTWISE)?;
    let y = ops.attention(&theta, &phi, &g, policy.tile)?;
    let z = conv(ops, &y, params, &format!("{prefix}.out"), ConvGeom::POINTWISE)?;
    ops.add(&z, x)
}
