//! Named parameter storage shared by every trainable model.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Rc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = Rc::new(t);
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(Rc::new(t));
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        match self.index.get(name) {
            Some(&i) => &self.tensors[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &*self.tensors[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub(crate) fn get_rc(&self, name: &str) -> Rc<Tensor> {
        match self.index.get(name) {
            Some(&i) => self.tensors[i].clone(),
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        Rc::make_mut(&mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Copies every entry whose name starts with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            if n.starts_with(prefix) {
                out.insert(n, t.clone());
            }
        }
        out
    }

    pub fn extend(&mut self, other: &ParamStore) {
        for (n, t) in other.iter() {
            self.insert(n, t.clone());
        }
    }
}

/// He-style uniform init for a weight with `fan_in` inputs.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() * 0.5;
    Tensor::uniform(shape, bound, rng)
}

/// Glorot-style uniform init.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}
