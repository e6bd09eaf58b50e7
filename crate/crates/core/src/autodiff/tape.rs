use std::collections::{BTreeMap, HashMap, HashSet};

use super::Ops;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::kernels::{self as k, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, g: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, g: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Softplus { x: Var },
    Scale { x: Var, k: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    SubScalar { x: Var, s: Var },
    Mean { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
    Concat { xs: Vec<Var> },
    Upsample { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Crop { x: Var },
    Reshape { x: Var },
    ChannelAffine { x: Var, scale: Vec<f64> },
    Attention { theta: Var, phi: Var, g: Var, tile: Option<usize>, mats: Vec<Vec<f64>> },
    L1 { a: Var, b: Var },
    Mse { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Parameters of sets registered with [`Tape::watch`] receive gradients;
/// parameters of other sets are treated as constants.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, String), Var>,
    watched: HashSet<u64>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
    by_param: HashMap<(u64, String), Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v)
    }

    pub fn param(&self, set: &ParameterSet, name: &str) -> Option<&Tensor> {
        self.by_param
            .get(&(set.id(), name.to_string()))
            .and_then(|v| self.by_var.get(v))
    }

    /// Gradients for every parameter of `set`; parameters the loss does not
    /// depend on get zeros.
    pub fn for_set(&self, set: &ParameterSet) -> BTreeMap<String, Tensor> {
        set.iter()
            .map(|(name, t)| {
                let g = self
                    .param(set, name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (name.to_string(), g)
            })
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters of `set` will receive gradients.
    pub fn watch(&mut self, set: &ParameterSet) {
        self.watched.insert(set.id());
    }

    /// A leaf that receives a gradient (used for input sensitivities).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss).numel() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape().to_vec(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let push = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| -> Result<()> {
                if !self.nodes[v.0].needs_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(t) => t.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
                Ok(())
            };
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    out.by_var.insert(Var(i), gy);
                }
                Op::Conv { x, w, b, g } => {
                    let xv = self.val(*x);
                    let wv = self.val(*w);
                    if wants(*x) {
                        let (_, _, h, wd) = xv.dims4()?;
                        push(&mut grads, *x, k::conv2d_backward_input(&gy, wv, *g, h, wd)?)?;
                    }
                    if wants(*w) {
                        push(&mut grads, *w, k::conv2d_backward_weight(xv, &gy, *g, wv.shape()[2])?)?;
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            push(&mut grads, *b, k::channel_sums(&gy)?)?;
                        }
                    }
                }
                Op::ConvT { x, w, b, g } => {
                    let xv = self.val(*x);
                    let wv = self.val(*w);
                    if wants(*x) {
                        push(&mut grads, *x, k::conv2d(&gy, wv, None, *g)?)?;
                    }
                    if wants(*w) {
                        push(&mut grads, *w, k::conv2d_backward_weight(&gy, xv, *g, wv.shape()[2])?)?;
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            push(&mut grads, *b, k::channel_sums(&gy)?)?;
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = k::linear_backward(&gy, self.val(*x), self.val(*w))?;
                    push(&mut grads, *x, dx)?;
                    push(&mut grads, *w, dw)?;
                    if let Some(b) = b {
                        push(&mut grads, *b, db)?;
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.val(*gamma);
                    let (dx, dg, db) = k::batch_norm_backward(&gy, xhat, inv_std, gv.data())?;
                    push(&mut grads, *x, dx)?;
                    push(&mut grads, *gamma, Tensor::new(gv.shape().to_vec(), dg)?)?;
                    push(&mut grads, *beta, Tensor::new(gv.shape().to_vec(), db)?)?;
                }
                Op::Relu { x } => {
                    let g = gy.zip_map(self.val(*x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                    push(&mut grads, *x, g)?;
                }
                Op::LeakyRelu { x, slope } => {
                    let g = gy.zip_map(self.val(*x), |g, v| if v > 0.0 { g } else { slope * g })?;
                    push(&mut grads, *x, g)?;
                }
                Op::Softplus { x } => {
                    let g = gy.zip_map(self.val(*x), |g, v| g * k::sigmoid(v))?;
                    push(&mut grads, *x, g)?;
                }
                Op::Scale { x, k } => push(&mut grads, *x, gy.map(|g| g * k))?,
                Op::Add { a, b } => {
                    push(&mut grads, *b, gy.clone())?;
                    push(&mut grads, *a, gy)?;
                }
                Op::Sub { a, b } => {
                    push(&mut grads, *b, gy.map(|g| -g))?;
                    push(&mut grads, *a, gy)?;
                }
                Op::SubScalar { x, s } => {
                    let sv = self.val(*s).shape().to_vec();
                    push(&mut grads, *s, Tensor::full(sv, -gy.sum()))?;
                    push(&mut grads, *x, gy)?;
                }
                Op::Mean { x } => {
                    let xv = self.val(*x);
                    let g = gy.data()[0] / xv.numel() as f64;
                    push(&mut grads, *x, Tensor::full(xv.shape().to_vec(), g))?;
                }
                Op::WeightedSum { terms } => {
                    for (v, w) in terms {
                        push(&mut grads, *v, gy.map(|g| g * w))?;
                    }
                }
                Op::Concat { xs } => {
                    let widths: Vec<usize> = xs.iter().map(|v| self.val(*v).shape()[1]).collect();
                    for (v, g) in xs.iter().zip(k::split_channels(&gy, &widths)?) {
                        push(&mut grads, *v, g)?;
                    }
                }
                Op::Upsample { x } => push(&mut grads, *x, k::upsample_bilinear2x_backward(&gy)?)?,
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.val(*x).shape().to_vec());
                    for (g, &idx) in gy.data().iter().zip(argmax) {
                        dx.data_mut()[idx] += g;
                    }
                    push(&mut grads, *x, dx)?;
                }
                Op::Crop { x } => {
                    let (_, _, h, w) = self.val(*x).dims4()?;
                    push(&mut grads, *x, k::crop_backward(&gy, h, w)?)?;
                }
                Op::Reshape { x } => {
                    let shape = self.val(*x).shape().to_vec();
                    push(&mut grads, *x, gy.reshape(shape)?)?;
                }
                Op::ChannelAffine { x, scale } => push(&mut grads, *x, k::channel_scale(&gy, scale)?)?,
                Op::Attention { theta, phi, g, tile, mats } => {
                    let (dt, dp, dg) = k::attention_backward(
                        &gy,
                        self.val(*theta),
                        self.val(*phi),
                        self.val(*g),
                        mats,
                        *tile,
                    )?;
                    push(&mut grads, *theta, dt)?;
                    push(&mut grads, *phi, dp)?;
                    push(&mut grads, *g, dg)?;
                }
                Op::L1 { a, b } => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let scale = gy.data()[0] / av.numel() as f64;
                    // subgradient 0 at ties
                    let da = av.zip_map(bv, |x, y| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            0.0
                        }
                    })?;
                    push(&mut grads, *b, da.map(|v| -v))?;
                    push(&mut grads, *a, da)?;
                }
                Op::Mse { a, b } => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let scale = 2.0 * gy.data()[0] / av.numel() as f64;
                    let da = av.zip_map(bv, |x, y| scale * (x - y))?;
                    push(&mut grads, *b, da.map(|v| -v))?;
                    push(&mut grads, *a, da)?;
                }
            }
        }
        out.by_param = self.params.clone();
        Ok(out)
    }
}

impl Ops for Tape {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn param(&mut self, set: &ParameterSet, name: &str) -> Result<Var> {
        let key = (set.id(), name.to_string());
        if let Some(v) = self.params.get(&key) {
            return Ok(*v);
        }
        let t = set.get(name)?.clone();
        let v = self.push(t, Op::Leaf, self.watched.contains(&set.id()));
        self.params.insert(key, v);
        Ok(v)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, g: ConvGeom) -> Result<Var> {
        let y = k::conv2d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), g)?;
        let mut inputs = vec![*x, *w];
        inputs.extend(b.copied());
        Ok(self.record(y, Op::Conv { x: *x, w: *w, b: b.copied(), g }, &inputs))
    }

    fn conv_transpose2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, g: ConvGeom) -> Result<Var> {
        let y = k::conv_transpose2d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), g)?;
        let mut inputs = vec![*x, *w];
        inputs.extend(b.copied());
        Ok(self.record(y, Op::ConvT { x: *x, w: *w, b: b.copied(), g }, &inputs))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = k::linear(self.val(*x), self.val(*w), b.map(|b| self.val(*b)))?;
        let mut inputs = vec![*x, *w];
        inputs.extend(b.copied());
        Ok(self.record(y, Op::Linear { x: *x, w: *w, b: b.copied() }, &inputs))
    }

    fn batch_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (y, xhat, inv_std) =
            k::batch_norm(self.val(*x), self.val(*gamma).data(), self.val(*beta).data(), eps)?;
        let op = Op::BatchNorm {
            x: *x,
            gamma: *gamma,
            beta: *beta,
            xhat,
            inv_std,
        };
        Ok(self.record(y, op, &[*x, *gamma, *beta]))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = self.val(*x).map(|v| v.max(0.0));
        self.record(y, Op::Relu { x: *x }, &[*x])
    }

    fn leaky_relu(&mut self, x: &Var, slope: f64) -> Var {
        let y = self.val(*x).map(|v| if v > 0.0 { v } else { slope * v });
        self.record(y, Op::LeakyRelu { x: *x, slope }, &[*x])
    }

    fn softplus(&mut self, x: &Var) -> Var {
        let y = self.val(*x).map(k::softplus);
        self.record(y, Op::Softplus { x: *x }, &[*x])
    }

    fn scale(&mut self, x: &Var, s: f64) -> Var {
        let y = self.val(*x).map(|v| v * s);
        self.record(y, Op::Scale { x: *x, k: s }, &[*x])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.val(*a).zip_map(self.val(*b), |x, y| x + y)?;
        Ok(self.record(y, Op::Add { a: *a, b: *b }, &[*a, *b]))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.val(*a).zip_map(self.val(*b), |x, y| x - y)?;
        Ok(self.record(y, Op::Sub { a: *a, b: *b }, &[*a, *b]))
    }

    fn sub_scalar(&mut self, x: &Var, s: &Var) -> Result<Var> {
        let sv = self.val(*s);
        if sv.numel() != 1 {
            return Err(Error::shape("sub_scalar expects a one-element operand"));
        }
        let s0 = sv.data()[0];
        let y = self.val(*x).map(|v| v - s0);
        Ok(self.record(y, Op::SubScalar { x: *x, s: *s }, &[*x, *s]))
    }

    fn mean(&mut self, x: &Var) -> Var {
        let y = Tensor::scalar(self.val(*x).mean());
        self.record(y, Op::Mean { x: *x }, &[*x])
    }

    fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, w0) = terms
            .first()
            .ok_or_else(|| Error::shape("weighted sum of nothing"))?;
        let mut acc = self.val(*first).map(|v| v * w0);
        for (t, w) in &terms[1..] {
            acc = acc.zip_map(self.val(*t), |a, b| a + w * b)?;
        }
        let inputs: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        Ok(self.record(acc, Op::WeightedSum { terms: terms.to_vec() }, &inputs))
    }

    fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = xs.iter().map(|v| self.val(*v)).collect();
        let y = k::concat_channels(&refs)?;
        Ok(self.record(y, Op::Concat { xs: xs.to_vec() }, xs))
    }

    fn upsample_bilinear2x(&mut self, x: &Var) -> Result<Var> {
        let y = k::upsample_bilinear2x(self.val(*x))?;
        Ok(self.record(y, Op::Upsample { x: *x }, &[*x]))
    }

    fn max_pool2x2(&mut self, x: &Var) -> Result<Var> {
        let (y, argmax) = k::max_pool2x2(self.val(*x))?;
        Ok(self.record(y, Op::MaxPool { x: *x, argmax }, &[*x]))
    }

    fn crop(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let y = k::crop(self.val(*x), h, w)?;
        Ok(self.record(y, Op::Crop { x: *x }, &[*x]))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = self.val(*x).clone().reshape(shape)?;
        Ok(self.record(y, Op::Reshape { x: *x }, &[*x]))
    }

    fn channel_affine(&mut self, x: &Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let y = k::channel_affine(self.val(*x), scale, shift)?;
        Ok(self.record(y, Op::ChannelAffine { x: *x, scale: scale.to_vec() }, &[*x]))
    }

    fn attention(&mut self, theta: &Var, phi: &Var, g: &Var, tile: Option<usize>) -> Result<Var> {
        let (y, mats) = k::attention(self.val(*theta), self.val(*phi), self.val(*g), tile)?;
        let op = Op::Attention {
            theta: *theta,
            phi: *phi,
            g: *g,
            tile,
            mats,
        };
        Ok(self.record(y, op, &[*theta, *phi, *g]))
    }

    fn l1(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let d = self.val(*a).zip_map(self.val(*b), |x, y| (x - y).abs())?;
        Ok(self.record(Tensor::scalar(d.mean()), Op::L1 { a: *a, b: *b }, &[*a, *b]))
    }

    fn mse(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let d = self.val(*a).zip_map(self.val(*b), |x, y| (x - y) * (x - y))?;
        Ok(self.record(Tensor::scalar(d.mean()), Op::Mse { a: *a, b: *b }, &[*a, *b]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let eps = 1e-6;
        let mut g = Tensor::zeros(x.shape().to_vec());
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        g
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape.to_vec(), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    fn check(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.variable(x.clone());
        let loss = build(&mut tape, v);
        let g = tape.backward(loss).unwrap();
        let analytic = g.wrt(v).unwrap().clone();
        let numeric = numeric_grad(&x, |xp| {
            let mut t = Tape::new();
            let v = t.variable(xp.clone());
            let l = build(&mut t, v);
            t.value(&l).data()[0]
        });
        let err = analytic.max_abs_diff(&numeric).unwrap();
        assert!(err < 1e-6, "max gradient error {err}");
    }

    #[test]
    fn conv_chain_gradient() {
        let w = pseudo(&[3, 2, 3, 3], 7);
        let w2 = pseudo(&[2, 3, 3, 3], 8);
        check(pseudo(&[2, 2, 6, 6], 1), |t, x| {
            let w = t.constant(w.clone());
            let w2 = t.constant(w2.clone());
            let y = t.conv2d(&x, &w, None, ConvGeom::DOWN2).unwrap();
            let y = t.leaky_relu(&y, 0.2);
            let y = t.upsample_bilinear2x(&y).unwrap();
            let y = t.conv2d(&y, &w2, None, ConvGeom::SAME3).unwrap();
            let s = t.softplus(&y);
            t.mean(&s)
        });
    }

    #[test]
    fn attention_gradient() {
        check(pseudo(&[1, 6, 3, 4], 2), |t, x| {
            let th = t.scale(&x, 0.7);
            let y = t.attention(&th, &x, &x, Some(2)).unwrap();
            let z = t.scale(&y, 1.5);
            t.mse(&z, &th).unwrap()
        });
    }

    #[test]
    fn batch_norm_and_linear_gradient() {
        let gamma = Tensor::new([3], vec![1.0, 0.5, -2.0]).unwrap();
        let beta = Tensor::new([3], vec![0.1, 0.0, 0.3]).unwrap();
        let w = pseudo(&[2, 12], 5);
        check(pseudo(&[2, 3, 2, 2], 3), |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let y = t.batch_norm(&x, &g, &b, 1e-5).unwrap();
            let y = t.reshape(&y, &[2, 12]).unwrap();
            let w = t.constant(w.clone());
            let y = t.linear(&y, &w, None).unwrap();
            let m = t.mean(&y);
            let d = t.sub_scalar(&y, &m).unwrap();
            let s = t.softplus(&d);
            t.mean(&s)
        });
    }

    #[test]
    fn pool_concat_affine_gradient() {
        check(pseudo(&[1, 2, 4, 5], 4), |t, x| {
            let p = t.max_pool2x2(&x).unwrap();
            let q = t.crop(&x, 2, 2).unwrap();
            let c = t.concat_channels(&[p, q]).unwrap();
            let a = t.channel_affine(&c, &[1.0, 2.0, -1.0, 0.5], &[0.0, 1.0, 0.0, 0.0]).unwrap();
            let r = t.relu(&a);
            let z = t.constant(Tensor::zeros([1, 4, 2, 2]));
            let s = t.weighted_sum(&[(r, 0.3), (a, 1.2)]).unwrap();
            t.l1(&s, &z).unwrap()
        });
    }

    #[test]
    fn transposed_conv_gradient() {
        let w = pseudo(&[2, 3, 4, 4], 9);
        check(pseudo(&[1, 2, 3, 3], 5), |t, x| {
            let w = t.constant(w.clone());
            let y = t.conv_transpose2d(&x, &w, None, ConvGeom { stride: 2, pad: 1 }).unwrap();
            let z = t.constant(Tensor::zeros([1, 3, 6, 6]));
            t.mse(&y, &z).unwrap()
        });
    }

    #[test]
    fn params_are_shared_and_unwatched_sets_get_no_grad() {
        let mut set = ParameterSet::new();
        set.insert("w", Tensor::full([1, 1, 1, 1], 2.0)).unwrap();
        let other = set.clone();
        let mut tape = Tape::new();
        tape.watch(&set);
        let x = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let w1 = tape.param(&set, "w").unwrap();
        let w2 = tape.param(&set, "w").unwrap();
        assert_eq!(w1, w2);
        let w3 = tape.param(&other, "w").unwrap();
        let a = tape.conv2d(&x, &w1, None, ConvGeom::POINTWISE).unwrap();
        let b = tape.conv2d(&a, &w3, None, ConvGeom::POINTWISE).unwrap();
        let l = tape.mean(&b);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.param(&set, "w").unwrap().data(), &[2.0]);
        assert!(g.param(&other, "w").is_none());
    }
}
