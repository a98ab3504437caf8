use std::collections::HashMap;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            vars: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    /// Records every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            vars: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.iter() {
            let o = other.require(name)?;
            if o.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    o.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Graph(format!("parameter '{name}' is not bound")))
    }

    /// Collects gradients for every bound parameter; unreached ones are zero.
    pub fn gradients(&self, tape: &Tape, grads: &super::Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, v) in &self.vars {
            out.insert(name.clone(), grads.get_or_zeros(*v, &tape.shape(*v)));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub(crate) step: u64,
    pub(crate) m: ParamStore,
    pub(crate) v: ParamStore,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Training(format!("no gradient for parameter '{name}'")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim(format!(
                    "gradient for '{name}' has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Training(format!("non-finite gradient for parameter '{name}'")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let names = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let g = grads.get(name).expect("checked above");
            let shape = g.shape().to_vec();
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(shape.clone()));
                self.v.insert(name.clone(), Tensor::zeros(shape));
            }
            let mi = self.m.index[name.as_str()];
            let vi = self.v.index[name.as_str()];
            let m = self.m.tensors[mi].data_mut();
            let v = self.v.tensors[vi].data_mut();
            let p = params.tensors_mut()[i].data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments and step count as a parameter store (for checkpointing).
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("adam.step", Tensor::vector(vec![self.step as f32]));
        for (n, t) in self.m.iter() {
            s.insert(format!("m.{n}"), t.clone());
        }
        for (n, t) in self.v.iter() {
            s.insert(format!("v.{n}"), t.clone());
        }
        s
    }

    pub fn from_store(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        let step = store.require("adam.step")?.item()? as u64;
        let mut adam = Adam::new(config);
        adam.step = step;
        for (n, t) in store.iter() {
            if let Some(rest) = n.strip_prefix("m.") {
                adam.m.insert(rest, t.clone());
            } else if let Some(rest) = n.strip_prefix("v.") {
                adam.v.insert(rest, t.clone());
            }
        }
        Ok(adam)
    }
}
