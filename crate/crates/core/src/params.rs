//! Named parameter storage.
//!
//! Every learnable tensor and every running statistic lives in a
//! [`ParamStore`] under a dotted name such as `branch.1.block.0.deform_weight`.
//! The first name segment (plus the task index for per-task groups) defines
//! the group a parameter belongs to, which is how ablations freeze or inspect
//! whole components at once.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{DemtError, Result};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Trainable,
    /// State such as running statistics; saved in checkpoints, never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
}

impl Param {
    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable && !self.frozen
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DemtError::InvalidArgument(format!(
                "parameter {name} registered twice"
            )));
        }
        let id = ParamId(self.params.len());
        let value = value.with_requires_grad(kind == ParamKind::Trainable);
        self.params.push(Param {
            name: name.clone(),
            value,
            kind,
            frozen: false,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Records the parameter on `tape` (once per tape) and returns its handle.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        let p = &self.params[id.0];
        tape.bind_param(id, &p.value, p.is_trainable())
    }

    /// Adds the gradients of every parameter bound on `tape` into the
    /// parameters' own gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        let mut bindings: Vec<_> = tape.param_bindings().collect();
        bindings.sort();
        for (id, var) in bindings {
            if let Some(g) = grads.get(var) {
                self.params[id.0].value.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.clear_grad());
    }

    /// Group a parameter belongs to: `trunk`, `decoder`, `branch.<t>` or
    /// `head.<t>` for the model's naming scheme.
    pub fn group_of(name: &str) -> &str {
        let mut parts = name.splitn(3, '.');
        let first = parts.next().unwrap_or("");
        match (first, parts.next()) {
            ("branch" | "head", Some(idx)) if idx.chars().all(|c| c.is_ascii_digit()) => {
                &name[..first.len() + 1 + idx.len()]
            }
            _ => first,
        }
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .params
            .iter()
            .map(|p| Self::group_of(&p.name).to_string())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Freezes or unfreezes every parameter in `group`; returns how many changed.
    pub fn set_group_frozen(&mut self, group: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut() {
            if Self::group_of(&p.name) == group && p.kind == ParamKind::Trainable {
                p.frozen = frozen;
                p.value.set_requires_grad(!frozen);
                n += 1;
            }
        }
        n
    }

    /// Scalar count of trainable values whose name starts with `prefix`.
    pub fn count_values(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable && p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }
}

/// Deterministic initialisers drawing from the model's seeded stream.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// `uniform(−1/√fan_in, 1/√fan_in)`.
    pub fn fan_in_uniform(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let data = (0..numel(shape))
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names() {
        assert_eq!(ParamStore::group_of("trunk.stem0.weight"), "trunk");
        assert_eq!(ParamStore::group_of("branch.2.reduce.weight"), "branch.2");
        assert_eq!(ParamStore::group_of("head.0.bias"), "head.0");
        assert_eq!(ParamStore::group_of("decoder.ti.attn.q.weight"), "decoder");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1]).unwrap(), ParamKind::Trainable)
            .unwrap();
        assert!(s
            .add("a", Tensor::zeros(&[1]).unwrap(), ParamKind::Trainable)
            .is_err());
    }

    #[test]
    fn freezing_stops_gradients() {
        let mut s = ParamStore::new();
        let id = s
            .add(
                "head.0.weight",
                Tensor::ones(&[2]).unwrap(),
                ParamKind::Trainable,
            )
            .unwrap();
        assert_eq!(s.set_group_frozen("head.0", true), 1);
        let mut tape = Tape::new();
        let v = s.bind(&mut tape, id);
        assert!(!tape.requires_grad(v));
    }
}
