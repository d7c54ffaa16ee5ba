use std::collections::HashMap;

use hot_core::DenseTensor;

use crate::layer::LayerError;
use crate::tape::{Gradients, Tape, TapeError, Var};

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, DenseTensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseTensor) -> Result<(), LayerError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(LayerError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&DenseTensor, LayerError> {
        self.get(name).ok_or_else(|| LayerError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseTensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &DenseTensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut DenseTensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Result<Bound<'a>, TapeError> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Bound { params: self, vars })
    }
}

/// [`Params`] recorded on a tape.
pub struct Bound<'a> {
    params: &'a Params,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var, LayerError> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| LayerError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Adjoints in parameter order.
    pub fn gradients(&self, grads: &mut Gradients) -> Result<Vec<DenseTensor>, LayerError> {
        self.vars
            .iter()
            .zip(self.params.names())
            .map(|(&v, name)| {
                grads
                    .take(v)
                    .ok_or_else(|| LayerError::MissingParam(format!("gradient of {name}")))
            })
            .collect()
    }
}
