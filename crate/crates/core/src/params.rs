//! Named trainable parameters and their gradients.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Graph};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Handle to a parameter, tagged with the store that issued it so that a
/// graph binding several stores routes each gradient to its owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of uniquely named parameters. Clones share the tag of
/// the original, so ids stay valid across them.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tag: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self {
            tag: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.tag, "parameter id used with a foreign store");
        id.index
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId { store: self.tag, index: self.params.len() - 1 })
    }

    /// Add a parameter drawn from N(0, std²).
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::usage(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[self.slot(id)].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        let i = self.slot(id);
        &mut self.params[i].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[self.slot(id)].grad
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[self.slot(id)]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&index| ParamId { store: self.tag, index })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        let store = self.tag;
        (0..self.params.len()).map(move |index| ParamId { store, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Add the gradients of every parameter of this store bound on `graph`.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        self.accumulate_scaled(graph, grads, 1.0);
    }

    pub fn accumulate_scaled(&mut self, graph: &Graph, grads: &Gradients, scale: f64) {
        for &(var, id) in graph.bindings() {
            if id.store != self.tag {
                continue;
            }
            if let Some(g) = grads.get(var) {
                for (a, b) in self.params[id.index].grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    /// Round every value to `f32` so the in-memory model equals its checkpoint.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.round_to_f32();
        }
    }

    /// Append all parameters to a checkpoint.
    pub fn export(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for p in &self.params {
            ckpt.push(p.name.clone(), p.value.clone())?;
        }
        Ok(())
    }

    /// Overwrite every parameter with the checkpoint entry of the same name.
    pub fn import(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for p in &mut self.params {
            let t = ckpt
                .get(&p.name)
                .ok_or_else(|| Error::usage(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::dim(format!(
                    "parameter {}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
