//! Named parameter storage and binding of parameters onto a graph.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Ordered map from dotted parameter names to values.
///
/// Iteration order is insertion order, which makes checkpoints and optimizer
/// state byte-stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with `prefix.`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> + 'a {
        self.iter().filter(move |(k, _)| in_scope(k, prefix))
    }

    /// Sets every entry under `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.entries.iter_mut() {
            if in_scope(k, prefix) {
                v.fill(T::zero());
            }
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.entries.extend(other.entries);
    }
}

fn in_scope(name: &str, prefix: &str) -> bool {
    prefix.is_empty() || name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Joins dotted name components, skipping empty ones.
pub fn join(prefix: &str, name: &str) -> String {
    match (prefix.is_empty(), name.is_empty()) {
        (true, _) => name.to_string(),
        (_, true) => prefix.to_string(),
        _ => format!("{prefix}.{name}"),
    }
}

/// Lazily records parameters of a store as leaves of one graph.
pub struct Binder<'g, T> {
    graph: &'g Graph<T>,
    store: &'g ParamStore<T>,
    track: bool,
    bound: RefCell<IndexMap<String, Var<'g, T>>>,
}

impl<'g, T: Scalar> Binder<'g, T> {
    /// With `track` false every parameter is bound as a constant.
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>, track: bool) -> Self {
        Binder { graph, store, track, bound: RefCell::new(IndexMap::new()) }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore<T> {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var<'g, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self.store.require(name)?.clone();
        let var = if self.track { self.graph.param(value) } else { self.graph.constant(value) };
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(value)
    }

    /// Gradient for every parameter in the store, zero where the output did
    /// not depend on it (including parameters never bound).
    pub fn gradients(&self, grads: &Gradients<T>) -> ParamStore<T> {
        let bound = self.bound.borrow();
        let mut out = ParamStore::new();
        for (name, value) in self.store.iter() {
            let g = match bound.get(name) {
                Some(&v) => grads.get_or_zero(v),
                None => Tensor::zeros(value.shape()),
            };
            out.insert(name, g);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Layer building blocks.

/// Registers a `(fan_in, fan_out)` weight with scaled Gaussian init and a zero
/// bias.
pub fn init_linear<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let std = (1.0 / fan_in.max(1) as f64).sqrt();
    store.insert(join(prefix, "weight"), Tensor::randn(&[fan_in, fan_out], std, rng));
    store.insert(join(prefix, "bias"), Tensor::zeros(&[fan_out]));
}

/// `x · W + b` over the trailing axis.
pub fn linear<'g, T: Scalar>(b: &Binder<'g, T>, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = b.param(&join(prefix, "weight"))?;
    let bias = b.param(&join(prefix, "bias"))?;
    x.matmul(w)?.add(bias)
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.insert(join(prefix, "weight"), Tensor::ones(&[dim]));
    store.insert(join(prefix, "bias"), Tensor::zeros(&[dim]));
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the trailing axis.
pub fn layer_norm<'g, T: Scalar>(b: &Binder<'g, T>, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let gamma = b.param(&join(prefix, "weight"))?;
    let beta = b.param(&join(prefix, "bias"))?;
    let last = x.shape().len().checked_sub(1).ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
    let centered = x.sub(x.mean_axis(last, true)?)?;
    let var = centered.square().mean_axis(last, true)?;
    let inv = var.add_scalar(lit(LAYER_NORM_EPS)).sqrt();
    centered.div(inv)?.mul(gamma)?.add(beta)
}

/// Registers a `(k, k, c_in, c_out)` kernel and bias.
pub fn init_conv<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, k: usize, c_in: usize, c_out: usize, rng: &mut impl Rng) {
    let std = (1.0 / (k * k * c_in).max(1) as f64).sqrt();
    store.insert(join(prefix, "weight"), Tensor::randn(&[k, k, c_in, c_out], std, rng));
    store.insert(join(prefix, "bias"), Tensor::zeros(&[c_out]));
}

/// Same-padded stride-1 convolution plus bias on `(batch, h, w, c)`.
pub fn conv<'g, T: Scalar>(b: &Binder<'g, T>, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = b.param(&join(prefix, "weight"))?;
    let bias = b.param(&join(prefix, "bias"))?;
    x.conv2d(w)?.add(bias)
}
