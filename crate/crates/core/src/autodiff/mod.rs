//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it executes. Values are computed
//! eagerly; [`Graph::backward`] walks the tape once in reverse and returns the
//! gradient of a scalar loss for every tracked leaf. A graph is single-use:
//! after `backward` it must be rebuilt by running the forward again.

mod broadcast;
mod ops;
mod sparse;

pub use ops::{window_extent, Activation, UnaryKind};
pub use sparse::SparseMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use broadcast::Bcast;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        ma: Bcast,
        mb: Bcast,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Affine {
        x: usize,
        scale: T,
    },
    Powf {
        x: usize,
        p: T,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    MinPair {
        a: usize,
        b: usize,
    },
    MatMul(ops::MatMulPlan),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        w: usize,
        b: usize,
        d: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SumAll {
        x: usize,
    },
    SumAxis {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        slabs: Vec<usize>,
    },
    Narrow {
        x: usize,
        outer: usize,
        slab_in: usize,
        offset: usize,
        slab_out: usize,
    },
    Sparse {
        x: usize,
        map: SparseMap<T>,
    },
    Unfold(ops::UnfoldPlan),
    BoxFilter3 {
        x: usize,
        h: usize,
        w: usize,
        c: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    UpsampleNearest {
        x: usize,
        w: usize,
        c: usize,
        factor: usize,
    },
    BilinearSample {
        src: usize,
        coords: usize,
    },
    Cross3 {
        a: usize,
        b: usize,
    },
    NormLast {
        x: usize,
        c: usize,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) tracked: bool,
}

/// Operation tape. See the module docs.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf, or `None` when the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Largest element count of any value recorded at or after `mark`
    /// (a previous [`Graph::len`]). Used to measure transient storage.
    pub fn peak_numel_since(&self, mark: usize) -> usize {
        self.nodes[mark.min(self.nodes.len())..]
            .iter()
            .map(|n| n.value.numel())
            .max()
            .unwrap_or(0)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let tracked = parents.iter().any(|&p| self.nodes[p].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Reverse accumulation from a one-element `loss`.
    ///
    /// Fails on a non-scalar loss and on a second call for the same recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this graph; re-record the forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            ops::backward_node(&self.nodes, i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => {
                    Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element of `x`.
pub fn finite_difference_grad<T: Scalar, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    let two_h = h + h;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((fp - fm) / two_h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("relative_error", a.shape(), b.shape()));
    }
    let (mut diff, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.to_f64_vec().into_iter().zip(b.to_f64_vec()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale == 0.0 {
        return Ok(diff.sqrt());
    }
    Ok(diff.sqrt() / scale)
}

/// Compares the reverse-mode gradient of `f` at `x` with central finite
/// differences and returns their [`relative_error`].
///
/// `f` records a scalar loss on a fresh graph given the leaf holding `x`.
pub fn gradient_check<T: Scalar, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<f64>
where
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let loss = f(&mut g, leaf)?;
    let analytic = g
        .backward(loss)?
        .take(leaf)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let numeric = finite_difference_grad(
        |probe| {
            let mut g = Graph::new();
            let leaf = g.constant(probe.clone());
            let loss = f(&mut g, leaf)?;
            g.value(loss).item()
        },
        x,
        h,
    )?;
    relative_error(&analytic, &numeric)
}

#[cfg(test)]
mod tests;
