use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter's storage inside a [`ParamRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors. Aliases resolve to the canonical storage, so a
/// parameter shared between two roles exists exactly once.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<F> {
    tensors: Vec<Tensor<F>>,
    names: Vec<String>,
    by_name: BTreeMap<String, ParamId>,
    aliases: BTreeMap<String, String>,
}

impl<F: Real> ParamRegistry<F> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
            by_name: BTreeMap::new(),
            aliases: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, mut tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) || self.aliases.contains_key(&name) {
            return Err(Error::config(format!("parameter {name} registered twice")));
        }
        tensor.set_requires_grad(true);
        let id = ParamId(self.tensors.len());
        self.tensors.push(tensor);
        self.names.push(name.clone());
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Makes `alias` another name for the storage behind `canonical`.
    pub fn alias(&mut self, alias: impl Into<String>, canonical: &str) -> Result<ParamId> {
        let alias = alias.into();
        let id = self
            .resolve(canonical)
            .ok_or_else(|| Error::config(format!("unknown parameter {canonical}")))?;
        if self.by_name.contains_key(&alias) || self.aliases.contains_key(&alias) {
            return Err(Error::config(format!("parameter {alias} registered twice")));
        }
        let target = self.names[id.0].clone();
        self.aliases.insert(alias, target);
        Ok(id)
    }

    pub fn resolve(&self, name: &str) -> Option<ParamId> {
        let canonical = self.aliases.get(name).map(String::as_str).unwrap_or(name);
        self.by_name.get(canonical).copied()
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Number of distinct storages.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.tensors
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (t, n))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count over distinct storages.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (id, g) in &grads.by_param {
            self.tensors[id.0].accumulate_grad(g);
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Snapshot of every canonical parameter's values, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor<F>> {
        self.iter()
            .map(|(_, name, t)| {
                let mut t = t.clone();
                t.zero_grad();
                (name.to_string(), t)
            })
            .collect()
    }

    /// Overwrites parameter values from a snapshot. Every canonical name
    /// must be present with a matching shape.
    pub fn load_snapshot(&mut self, snapshot: &BTreeMap<String, Tensor<F>>) -> Result<()> {
        if snapshot.len() != self.tensors.len() {
            return Err(Error::config(format!(
                "snapshot holds {} parameters, model has {}",
                snapshot.len(),
                self.tensors.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = snapshot
                .get(name)
                .ok_or_else(|| Error::config(format!("snapshot is missing {name}")))?;
            let dst = &mut self.tensors[i];
            if src.shape() != dst.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_snapshot",
                    left: dst.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            dst.values_mut().copy_from_slice(src.values());
            dst.zero_grad();
        }
        Ok(())
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    pub(crate) by_param: BTreeMap<ParamId, Vec<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.by_param.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn norm(&self, id: ParamId) -> f64 {
        self.get(id)
            .map(|g| g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    /// Adds `other` scaled by `weight` into `self`.
    pub fn merge_scaled(&mut self, other: Gradients<F>, weight: F) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b * weight),
                None => {
                    let g = if weight == F::one() {
                        g
                    } else {
                        g.into_iter().map(|v| v * weight).collect()
                    };
                    self.by_param.insert(id, g);
                }
            }
        }
    }
}
