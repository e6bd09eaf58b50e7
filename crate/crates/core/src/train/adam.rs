//! Adam with bias correction, over named parameter sets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::train::plan::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParameterSet,
    pub v: ParameterSet,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        let zeros = || {
            ParameterSet::from_map(
                params
                    .iter()
                    .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec())))
                    .collect(),
            )
        };
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of `params` by `grads` (keyed by parameter name).
    pub fn update(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Other(format!("no gradient for `{name}`")))?;
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::shape(format!("optimizer state for `{name}` does not match")));
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over all gradient entries.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParameterSet {
        ParameterSet::from_map([("w".to_string(), Tensor::full([2], v))].into())
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first update is lr · g/|g| (up to eps)
        let mut p = one(1.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let g: BTreeMap<_, _> = [("w".to_string(), Tensor::new([2], vec![0.5, -2.0]).unwrap())].into();
        s.update(&mut p, &g, 0.1).unwrap();
        let d = p.get("w").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-7);
        assert!((d[1] - 1.1).abs() < 1e-7);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = one(0.3);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let g: BTreeMap<_, _> = [("w".to_string(), Tensor::full([2], 7.0))].into();
        s.update(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn norm() {
        let g: BTreeMap<_, _> = [
            ("a".to_string(), Tensor::new([2], vec![3.0, 0.0]).unwrap()),
            ("b".to_string(), Tensor::new([1], vec![4.0]).unwrap()),
        ]
        .into();
        assert_eq!(grad_norm(&g), 5.0);
    }
}
