//! Named parameter storage and per-forward-pass sessions.
//!
//! A [`ParamStore`] owns plain buffers and is `Send + Sync`, so several
//! workers may evaluate the same model concurrently. Each forward pass
//! opens a [`Session`], which materializes every parameter as a graph leaf;
//! the session is confined to the thread that created it.

use std::collections::HashMap;

use crate::elem::Elem;
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<ParamId> {
        let name = name.into();
        if numel(shape) != data.len() {
            return invalid("ParamStore::add", format!("`{name}`: shape {shape:?} vs {} values", data.len()));
        }
        if self.index.contains_key(&name) {
            return invalid("ParamStore::add", format!("duplicate parameter `{name}`"));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> Result<ParamId> {
        let data = rng.normal_vec(numel(shape), std);
        self.add(name, shape, data)
    }

    pub fn add_fill(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, shape, vec![T::from_f64_lossy(value); numel(shape)])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    /// Mark trainable exactly the parameters accepted by `pred`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    /// Open a forward-pass session. With `track` false no parameter requires
    /// a gradient and no backward closures are recorded.
    pub fn session(&self, track: bool) -> Session<T> {
        let leaves = self
            .params
            .iter()
            .map(|p| {
                if track && p.trainable {
                    Tensor::leaf(&p.shape, p.data.clone())
                } else {
                    Tensor::new(&p.shape, p.data.clone())
                }
                .expect("store invariants guarantee valid shapes")
            })
            .collect();
        Session { leaves }
    }

    /// Element-type conversion of the whole store (e.g. f32 -> f64).
    pub fn cast<U: Elem>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameter leaves for one forward/backward pass.
pub struct Session<T: Elem> {
    leaves: Vec<Tensor<T>>,
}

impl<T: Elem> Session<T> {
    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.leaves[id.0]
    }

    /// Gradients collected after backward, aligned with the store. `None` for
    /// frozen parameters and for parameters the loss does not depend on.
    pub fn grads(&self) -> Vec<Option<Vec<T>>> {
        self.leaves.iter().map(|t| t.take_grad()).collect()
    }
}
