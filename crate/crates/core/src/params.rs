//! Named parameter collections and their binding into a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Places every parameter on the graph. Parameters for which `frozen`
    /// returns true become constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, frozen: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if frozen(name) {
                    g.constant(t.clone())
                } else {
                    g.input(name, t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles of bound parameters.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    /// Collects per-parameter gradients by name. Frozen parameters are
    /// absent from the result.
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            if let Some(t) = grads.take(v) {
                out.insert(name.clone(), t);
            }
        }
        out
    }
}

/// Adds `other` into `acc` entry by entry, in name order.
pub fn accumulate_gradients(
    acc: &mut BTreeMap<String, Tensor>,
    other: BTreeMap<String, Tensor>,
) -> Result<()> {
    for (name, t) in other {
        match acc.get_mut(&name) {
            Some(a) => {
                if a.shape() != t.shape() {
                    return Err(Error::shape("accumulate_gradients", name));
                }
                for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                    *x += y;
                }
            }
            None => {
                acc.insert(name, t);
            }
        }
    }
    Ok(())
}
