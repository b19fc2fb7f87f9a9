//! Named parameter store shared between a model and its training graphs.
//!
//! Parameters live outside any single tape: each forward pass re-leafs them
//! by id, and gradients come back keyed by the same ids so accumulation
//! across micro-batches and checkpointed chunks lands in one place.

use std::cell::RefCell;
use std::rc::Rc;

use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Stable identity of a parameter within a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<ParamEntry<T>>,
}

/// Shared handle; one model plus all of its graphs hold clones.
pub type StoreHandle<T> = Rc<RefCell<ParamStore<T>>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> StoreHandle<T> {
        Rc::new(RefCell::new(Self { entries: Vec::new() }))
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    /// Register a parameter with normal(0, sigma) init drawn from a stream
    /// derived from (seed, name), so init is independent of registration order.
    pub fn register_normal(&mut self, name: &str, shape: &[usize], sigma: f64, seed: u64) -> ParamId {
        let mut rng = Rng::derive(seed, name);
        let n: usize = shape.iter().product();
        let data = rng.normal_vec(n, sigma).into_iter().map(T::from_f64).collect();
        self.register(name, Tensor::from_vec(shape, data))
    }

    pub fn register_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn register_full(&mut self, name: &str, shape: &[usize], value: T) -> ParamId {
        self.register(name, Tensor::full(shape, value))
    }

    pub fn value(&self, id: ParamId) -> Tensor<T> {
        self.entries[id.0].value.clone()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter {} shape changed",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Gradient results of one backward pass, indexed like the store.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n_params: usize) -> Self {
        Self { by_param: (0..n_params).map(|_| None).collect() }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Tensor<T>) {
        if id.0 >= self.by_param.len() {
            self.by_param.resize_with(id.0 + 1, || None);
        }
        match &mut self.by_param[id.0] {
            Some(existing) => {
                let e = existing.data_mut();
                for (dst, src) in e.iter_mut().zip(grad.data()) {
                    *dst = *dst + *src;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    /// Merge another gradient set into this one (micro-batch accumulation).
    pub fn merge(&mut self, other: Gradients<T>) {
        for (i, g) in other.by_param.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.by_param.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }

    /// Gradient of one parameter; unused parameters read as zeros.
    pub fn of(&self, id: ParamId, store: &ParamStore<T>) -> Tensor<T> {
        match self.by_param.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(store.value(id).shape()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Global L2 norm across all gradients, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0f64;
        for g in self.by_param.iter().flatten() {
            for v in g.data() {
                let x = v.to_f64_();
                acc += x * x;
            }
        }
        acc.sqrt()
    }
}
