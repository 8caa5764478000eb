use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Named weights in canonical (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Inserts every weight into `g` as a trainable leaf or as a constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| {
                let mut t = t.clone();
                t.zero_grad();
                let v = if trainable { g.param(t) } else { g.constant(t) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds each bound leaf's gradient from `g` into the matching weight.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (name, t) in &mut self.map {
            if let Some(grad) = bound.vars.get(name).and_then(|&v| g.grad(v)) {
                t.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.map.values_mut().for_each(Tensor::zero_grad);
    }

    /// Checks that `other` names exactly the same weights with the same shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        let missing: Vec<&str> = self.names().filter(|n| other.get(n).is_none()).collect();
        let extra: Vec<&str> = other.names().filter(|n| self.get(n).is_none()).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "weight names differ; missing: {missing:?}, unexpected: {extra:?}"
            )));
        }
        for (name, t) in self.iter() {
            let o = other.get(name).expect("checked above");
            if t.shape() != o.shape() {
                return Err(Error::Checkpoint(format!(
                    "weight {name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown weight {name}")))
    }

    /// Replaces one handle, e.g. to differentiate with respect to a single weight.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }
}
