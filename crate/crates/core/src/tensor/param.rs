use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// A named trainable tensor. A frozen parameter is never touched by an
/// optimizer step.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Owns every parameter of a model, addressed by stable dotted names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(true),
            frozen: false,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> Result<&Parameter> {
        self.params
            .get(id.0)
            .ok_or_else(|| Error::UnknownParameter(format!("#{}", id.0)))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Parameter> {
        self.params
            .get_mut(id.0)
            .ok_or_else(|| Error::UnknownParameter(format!("#{}", id.0)))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        self.get(self.id(name)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn is_frozen(&self, prefix: &str) -> bool {
        let mut any = false;
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            if !p.frozen {
                return false;
            }
            any = true;
        }
        any
    }

    /// Total element count of parameters under `prefix`.
    pub fn numel(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Element count of every non-frozen parameter: what an optimizer updates.
    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and bytes of all parameters under `prefix`,
    /// in name order.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, id) in self.index.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            let p = &self.params[id.0];
            h.update(name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.tensor.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds gradients collected from a graph (see `Graph::param_grads`).
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, g) in grads {
            self.get_mut(*id)?.tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Squared L2 norm of accumulated gradients under `prefix`.
    pub fn grad_sq_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_prefix_contents() {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::full([2], 1.0)).unwrap();
        let b = s.add("b.w", Tensor::full([2], 1.0)).unwrap();
        let ca = s.checksum("a.");
        s.get_mut(b).unwrap().tensor.data_mut()[0] = 5.0;
        assert_eq!(ca, s.checksum("a."));
        assert_ne!(s.checksum("b."), ca);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::zeros([1])).unwrap();
        assert!(matches!(s.add("x", Tensor::zeros([1])), Err(Error::DuplicateParameter(_))));
    }

    #[test]
    fn freeze_changes_trainable_count() {
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::zeros([3, 4])).unwrap();
        s.add("head.w", Tensor::zeros([5])).unwrap();
        assert_eq!(s.trainable_numel(), 17);
        assert_eq!(s.set_frozen("enc.", true), 1);
        assert_eq!(s.trainable_numel(), 5);
        assert!(s.is_frozen("enc."));
        assert!(!s.is_frozen("head."));
    }
}
