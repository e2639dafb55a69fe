//! Named parameter storage and the per-step forward context.

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Running statistics and frozen projections are stored but not trained.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Uniform(-s, s) with s = 1/sqrt(fan_in).
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-s..s))
}

/// One recording pass: a fresh tape plus lazily created leaves for the
/// parameters touched by the forward computation.
pub struct Forward<'s> {
    pub tape: Tape,
    store: &'s mut ParamStore,
    leaves: Vec<Option<Var>>,
    pub train: bool,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s mut ParamStore, train: bool) -> Self {
        let n = store.len();
        Self {
            tape: Tape::new(),
            store,
            leaves: vec![None; n],
            train,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = if p.trainable {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// For running statistics, which are updated during the forward pass.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let grads = self.tape.backward(loss)?;
        let per_param = self
            .leaves
            .iter()
            .map(|leaf| leaf.and_then(|v| grads.get(v).map(|g| g.to_vec())))
            .collect();
        Ok(ParamGrads {
            per_param,
            all: grads,
        })
    }
}

pub struct ParamGrads {
    per_param: Vec<Option<Vec<f64>>>,
    pub all: Gradients,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.per_param.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn node(&self, v: Var) -> Option<&[f64]> {
        self.all.get(v)
    }
}
