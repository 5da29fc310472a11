use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Name-sorted collection of model tensors.
///
/// Iteration order is the lexicographic order of names, so every copy of a
/// store visits its entries identically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Parameter>,
}

/// Why two stores cannot be combined element-wise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Incompatibility {
    pub name: String,
    pub reason: String,
}

impl std::fmt::Display for Incompatibility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "`{}`: {}", self.name, self.reason)
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(TensorError::invalid(
                "parameter store",
                format!("duplicate entry `{name}`"),
            ));
        }
        self.entries.insert(
            name.to_string(),
            Parameter {
                kind,
                value,
                grad: None,
            },
        );
        Ok(())
    }

    pub fn insert_trainable(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, ParamKind::Trainable)
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Trainable)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Buffer)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        if entry.kind != ParamKind::Trainable {
            return Err(TensorError::invalid(
                "set_grad",
                format!("`{name}` is a buffer"),
            ));
        }
        if grad.shape() != entry.value.shape() {
            return Err(TensorError::mismatch("set_grad", entry.value.shape(), grad.shape()));
        }
        entry.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad = None;
        }
    }

    /// Copy of this store with every value (trainable and buffer) transformed.
    pub fn map_values(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> ParameterStore {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(name, p)| {
                    (
                        name.clone(),
                        Parameter {
                            kind: p.kind,
                            value: f(name, &p.value),
                            grad: None,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Checks that `other` has the same names, kinds and shapes.
    pub fn compatible_with(&self, other: &ParameterStore) -> std::result::Result<(), Incompatibility> {
        let mut ours = self.entries.iter();
        let mut theirs = other.entries.iter();
        loop {
            match (ours.next(), theirs.next()) {
                (None, None) => return Ok(()),
                (Some((name, _)), None) | (None, Some((name, _))) => {
                    return Err(Incompatibility {
                        name: name.clone(),
                        reason: "present in only one store".into(),
                    })
                }
                (Some((a_name, a)), Some((b_name, b))) => {
                    if a_name != b_name {
                        let name = a_name.min(b_name).clone();
                        return Err(Incompatibility {
                            name,
                            reason: "present in only one store".into(),
                        });
                    }
                    if a.kind != b.kind {
                        return Err(Incompatibility {
                            name: a_name.clone(),
                            reason: format!("kind {:?} vs {:?}", a.kind, b.kind),
                        });
                    }
                    if a.value.shape() != b.value.shape() {
                        return Err(Incompatibility {
                            name: a_name.clone(),
                            reason: format!(
                                "shape {:?} vs {:?}",
                                a.value.shape(),
                                b.value.shape()
                            ),
                        });
                    }
                }
            }
        }
    }

    /// Bitwise equality of names, kinds and values (gradients ignored).
    pub fn bit_eq(&self, other: &ParameterStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, a), (bn, b))| an == bn && a.kind == b.kind && a.value.bit_eq(&b.value))
    }
}
