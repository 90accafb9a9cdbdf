//! SGD with momentum and L2 weight decay.

use std::collections::BTreeMap;

use crate::error::{DemtError, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Velocity per parameter name; created on the first step.
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, weight_decay: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && weight_decay >= 0.0 && (0.0..1.0).contains(&momentum)) {
            return Err(DemtError::Config(format!(
                "invalid SGD settings lr={lr} wd={weight_decay} momentum={momentum}"
            )));
        }
        Ok(Self {
            lr,
            weight_decay,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// `v ← μv + g + wd·θ`, `θ ← θ − lr·v` for every trainable parameter,
    /// then clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let p = store.get(id);
            if !p.is_trainable() {
                continue;
            }
            if p.value.grad().is_none() {
                return Err(DemtError::InvalidArgument(format!(
                    "parameter {} has no gradient",
                    p.name
                )));
            }
        }
        for id in ids {
            let p = store.get_mut(id);
            if !p.is_trainable() {
                continue;
            }
            let g = p.value.take_grad().expect("checked above");
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let theta = p.value.data_mut();
            for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *t;
                *t -= self.lr * *vi;
            }
        }
        store.clear_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v), ParamKind::Trainable).unwrap();
        s
    }

    #[test]
    fn single_plain_step() {
        let mut s = one_param(1.0);
        let id = s.id("w").unwrap();
        s.get_mut(id).value.accumulate_grad(&[1.0]).unwrap();
        Sgd::new(0.1, 0.0, 0.0).unwrap().step(&mut s).unwrap();
        assert!((s.get(id).value.data()[0] - 0.9).abs() < 1e-15);
        assert!(s.get(id).value.grad().is_none());
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut s = one_param(2.5);
        let id = s.id("w").unwrap();
        s.get_mut(id).value.accumulate_grad(&[7.0]).unwrap();
        Sgd::new(0.0, 5e-4, 0.9).unwrap().step(&mut s).unwrap();
        assert_eq!(s.get(id).value.data()[0], 2.5);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut s = one_param(1.0);
        assert!(Sgd::new(0.1, 0.0, 0.0).unwrap().step(&mut s).is_err());
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = one_param(3.0);
        let id = s.id("w").unwrap();
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        for _ in 0..200 {
            let theta = s.get(id).value.data()[0];
            s.get_mut(id).value.accumulate_grad(&[2.0 * theta]).unwrap();
            opt.step(&mut s).unwrap();
        }
        let theta = s.get(id).value.data()[0];
        assert!(theta * theta < 1e-6);
    }
}
