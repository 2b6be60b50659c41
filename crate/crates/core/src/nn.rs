//! Named parameter storage and the two basic learnable layers.

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for every linear weight.
pub const INIT_STD: f64 = 0.02;
/// Variance guard of every layer normalization.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Flat, ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Tensor::randn(shape.to_vec(), std, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape("param set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Records every parameter as a tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        Binding {
            vars: self.values.iter().map(|v| g.leaf(v.clone())).collect(),
        }
    }

    /// Records every parameter as a constant of `g`.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Binding {
        Binding {
            vars: self.values.iter().map(|v| g.constant(v.clone())).collect(),
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.bit_eq(b))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Graph handles of a [`ParamStore`] bound into one recording.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Routes parameter `id` to another recorded value.
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }

    /// Moves the gradient of every parameter out of `grads`, zero-filled
    /// for parameters that did not reach the loss.
    pub fn take_grads<T: Scalar>(&self, grads: &mut Gradients<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(&store.values)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect()
    }
}

/// `x @ w + b` over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.normal(format!("{name}.w"), &[d_in, d_out], INIT_STD, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

/// Layer normalization over the trailing axis with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub w: ParamId,
    pub b: ParamId,
    pub d: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let w = store.ones(format!("{name}.w"), &[d]);
        let b = store.zeros(format!("{name}.b"), &[d]);
        Self { w, b, d }
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.w), p.var(self.b), lit(LN_EPS))
    }
}
