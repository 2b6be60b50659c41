//! Forward definitions and their adjoints.

use super::broadcast::{self, Bcast};
use super::sparse::SparseMap;
use super::{BinaryKind, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Abs,
    Exp,
    Ln,
    Sqrt,
    Square,
    Sin,
    Cos,
    Relu,
    Elu,
    /// tanh approximation of GELU
    Gelu,
    Sigmoid,
}

/// Pointwise nonlinearity selectable from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`, the tanh approximation.
    Gelu,
    /// Logistic squashing into (0, 1).
    Sigmoid,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "relu" => Activation::Relu,
            "elu" => Activation::Elu,
            "gelu" => Activation::Gelu,
            "sigmoid" => Activation::Sigmoid,
            "identity" => Activation::Identity,
            other => return Err(Error::Config(format!("unknown activation `{other}`"))),
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn unary_fwd<T: Scalar>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Ln => x.ln(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
        UnaryKind::Sin => x.sin(),
        UnaryKind::Cos => x.cos(),
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Elu => {
            if x > T::zero() {
                x
            } else {
                x.exp_m1()
            }
        }
        UnaryKind::Gelu => {
            let inner = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
            lit::<T>(0.5) * x * (T::one() + fast_tanh(inner))
        }
        UnaryKind::Sigmoid => {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        }
    }
}

/// `tanh` through one `exp`; absolute error near machine epsilon.
#[inline]
fn fast_tanh<T: Scalar>(x: T) -> T {
    let two = lit::<T>(2.0);
    if x >= T::zero() {
        T::one() - two / ((two * x).exp() + T::one())
    } else {
        two / ((-two * x).exp() + T::one()) - T::one()
    }
}

/// Derivative given input `x` and output `y`.
#[inline]
fn unary_grad<T: Scalar>(kind: UnaryKind, x: T, y: T) -> T {
    match kind {
        UnaryKind::Neg => -T::one(),
        UnaryKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Exp => y,
        UnaryKind::Ln => T::one() / x,
        UnaryKind::Sqrt => {
            if y > T::zero() {
                lit::<T>(0.5) / y
            } else {
                T::zero()
            }
        }
        UnaryKind::Square => x + x,
        UnaryKind::Sin => x.cos(),
        UnaryKind::Cos => -x.sin(),
        UnaryKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Elu => {
            if x > T::zero() {
                T::one()
            } else {
                x.exp()
            }
        }
        UnaryKind::Gelu => {
            let c = lit::<T>(GELU_C);
            let a = lit::<T>(GELU_A);
            let t = fast_tanh(c * (x + a * x * x * x));
            let half = lit::<T>(0.5);
            half * (T::one() + t)
                + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
        }
        UnaryKind::Sigmoid => y * (T::one() - y),
    }
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

#[derive(Clone, Debug)]
pub(crate) struct MatMulPlan {
    a: usize,
    b: usize,
    ta: bool,
    tb: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

impl MatMulPlan {
    /// Strides of the logical `m x k` view of `a` (or its stored transpose).
    fn a_strides(&self) -> (isize, isize) {
        if self.ta {
            (1, self.m as isize)
        } else {
            (self.k as isize, 1)
        }
    }

    fn b_strides(&self) -> (isize, isize) {
        if self.tb {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct UnfoldPlan {
    x: usize,
    h: usize,
    w: usize,
    d: usize,
    window: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Output extent of a sliding window: `floor((n - k + 2 pad) / stride) + 1`.
pub fn window_extent(n: usize, window: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if window == 0 || stride == 0 || padded < window {
        return None;
    }
    Some((padded - window) / stride + 1)
}

/// Interpolation cell for a continuous coordinate. Integer coordinates resolve
/// to the lower cell; coordinates outside `[0, size - 1]` have no cell.
#[inline]
fn cell<T: Scalar>(u: T, size: usize) -> Option<(usize, usize, T)> {
    let max = lit::<T>(size as f64 - 1.0);
    if !(u >= T::zero() && u <= max) {
        return None;
    }
    if size == 1 {
        return Some((0, 0, T::zero()));
    }
    let c = u.ceil().to_f64().unwrap_or(0.0) as isize - 1;
    let i0 = c.clamp(0, size as isize - 2) as usize;
    Some((i0, i0 + 1, u - lit::<T>(i0 as f64)))
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast::broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(
                match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                    BinaryKind::Div => "div",
                },
                &sa,
                &sb,
            )
        })?;
        let ma = broadcast::plan(&sa, &out_shape);
        let mb = broadcast::plan(&sb, &out_shape);
        let n = numel(&out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<T> = match (&ma, &mb) {
            (Bcast::Same, Bcast::Same) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Scalar) => av.iter().map(|&x| f(x, bv[0])).collect(),
            (Bcast::Same, Bcast::Cycle(c)) => av
                .chunks(*c)
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect(),
            _ => (0..n).map(|i| f(av[ma.at(i)], bv[mb.at(i)])).collect(),
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                ma,
                mb,
            },
            &[a.0, b.0],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| unary_fwd(kind, v));
        self.push(value, Op::Unary { kind, x: x.0 }, &[x.0])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Cos, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.unary(UnaryKind::Relu, x),
            Activation::Elu => self.unary(UnaryKind::Elu, x),
            Activation::Gelu => self.unary(UnaryKind::Gelu, x),
            Activation::Sigmoid => self.unary(UnaryKind::Sigmoid, x),
            Activation::Identity => x,
        }
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x: x.0, scale }, &[x.0])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.affine(x, T::one(), c)
    }

    pub fn powf(&mut self, x: Var, p: T) -> Var {
        let value = self.value(x).map(|v| v.powf(p));
        self.push(value, Op::Powf { x: x.0, p }, &[x.0])
    }

    /// Elementwise clamp; the gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(value, Op::Clamp { x: x.0, lo, hi }, &[x.0])
    }

    /// Elementwise minimum of two equally shaped values; ties go to `a`.
    pub fn min_pair(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("min_pair", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::MinPair { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` where `op` transposes the last two axes when the flag is set.
    ///
    /// Operands are 2-D or 3-D; a 2-D operand broadcasts over the other's batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return Err(err());
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(err());
        }
        let a_batched = sa.len() == 3;
        let b_batched = sb.len() == 3;
        let batch = match (a_batched, b_batched) {
            (true, true) if sa[0] != sb[0] => return Err(err()),
            (true, _) => sa[0],
            (false, true) => sb[0],
            (false, false) => 1,
        };
        let plan = MatMulPlan {
            a: a.0,
            b: b.0,
            ta,
            tb,
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let ao = if a_batched { bi * m * k } else { 0 };
                let bo = if b_batched { bi * k * n } else { 0 };
                T::gemm(
                    m,
                    k,
                    n,
                    &av[ao..],
                    plan.a_strides(),
                    &bv[bo..],
                    plan.b_strides(),
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let shape = if a_batched || b_batched {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(plan), &[a.0, b.0]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Config(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                x: x.0,
                outer,
                len,
                inner,
            },
            &[x.0],
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `weight * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, weight: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Config("layer_norm on a scalar".into()))?;
        if self.shape(weight) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(weight)));
        }
        let src = self.value(x).data();
        let (wv, bv) = (self.value(weight).data(), self.value(bias).data());
        let rows = src.len() / d.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let dn = lit::<T>(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * wv[j] + bv[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                w: weight.0,
                b: bias.0,
                d,
                xhat,
                rstd,
            },
            &[x.0, weight.0, bias.0],
        ))
    }

    /// Sum of all elements as a zero-dimensional value.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, lit(1.0 / n as f64))
    }

    /// Sum along `axis`, removing it unless `keepdim`.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Config(format!("sum axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut new_shape = shape.clone();
        if keepdim {
            new_shape[axis] = 1;
        } else {
            new_shape.remove(axis);
        }
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(
            value,
            Op::SumAxis {
                x: x.0,
                outer,
                len,
                inner,
            },
            &[x.0],
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::Config(format!("mean axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, lit(1.0 / len.max(1) as f64)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: x.0 }, &[x.0]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Config("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Config(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let slabs: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let width: usize = slabs.iter().sum();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            for (&v, &slab) in xs.iter().zip(&slabs) {
                out.extend_from_slice(&self.value(v).data()[o * slab..(o + 1) * slab]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let parents: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(
            value,
            Op::Concat {
                xs: parents.clone(),
                outer,
                slabs,
            },
            &parents,
        ))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Config(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let (slab_in, offset, slab_out) = (full * inner, start * inner, len * inner);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * slab_out);
        for o in 0..outer {
            out.extend_from_slice(&src[o * slab_in + offset..o * slab_in + offset + slab_out]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(
            value,
            Op::Narrow {
                x: x.0,
                outer,
                slab_in,
                offset,
                slab_out,
            },
            &[x.0],
        ))
    }

    /// Applies a fixed sparse linear map.
    pub fn sparse(&mut self, x: Var, map: SparseMap<T>) -> Result<Var> {
        if self.value(x).numel() != map.in_len {
            return Err(Error::shape("sparse", self.shape(x), &[map.in_len]));
        }
        let value = Tensor::new(map.out_shape.clone(), map.apply(self.value(x).data()))?;
        Ok(self.push(value, Op::Sparse { x: x.0, map }, &[x.0]))
    }

    /// Picks flat elements of `x`; `None` yields zero.
    pub fn gather(&mut self, x: Var, index: &[Option<usize>], shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != index.len() {
            return Err(Error::shape("gather", &shape, &[index.len()]));
        }
        let n = self.value(x).numel();
        let mut b = SparseMap::builder(shape, n);
        for &i in index {
            if let Some(i) = i {
                if i >= n {
                    return Err(Error::Config(format!("gather index {i} out of range {n}")));
                }
                b.push(i, T::one());
            }
            b.end_row();
        }
        self.sparse(x, b.finish())
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let idx: Vec<Option<usize>> = (0..r * c).map(|o| Some((o % r) * c + o / r)).collect();
        self.gather(x, &idx, [c, r])
    }

    /// Soft-split patch extraction: `H x W x d` to `(H'W') x (window * window * d)`,
    /// rows in raster order, columns ordered (window-row, window-col, channel),
    /// zero padding.
    pub fn unfold(&mut self, x: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("unfold", &s, &[3]));
        }
        let (h, w, d) = (s[0], s[1], s[2]);
        let bad = || {
            Error::Config(format!(
                "unfold window {window} stride {stride} pad {pad} gives no output for {h}x{w}"
            ))
        };
        let ho = window_extent(h, window, stride, pad).ok_or_else(bad)?;
        let wo = window_extent(w, window, stride, pad).ok_or_else(bad)?;
        let plan = UnfoldPlan {
            x: x.0,
            h,
            w,
            d,
            window,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = window * window * d;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); ho * wo * cols];
        for_each_patch(&plan, |dst, srco| {
            out[dst..dst + d].copy_from_slice(&src[srco..srco + d]);
        });
        let value = Tensor::new([ho * wo, cols], out)?;
        Ok(self.push(value, Op::Unfold(plan), &[x.0]))
    }

    /// 2x2 max pooling with stride 2 over `H x W x C`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] < 2 || s[1] < 2 {
            return Err(Error::shape("max_pool2", &s, &[2, 2, 1]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(ho * wo * c);
        let mut argmax = Vec::with_capacity(ho * wo * c);
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = (oy * 2 * w + ox * 2) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([ho, wo, c], out)?;
        Ok(self.push(value, Op::MaxPool { x: x.0, argmax }, &[x.0]))
    }

    /// Nearest-neighbour upsampling of `H x W x C` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::shape("upsample_nearest", &s, &[factor]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(h * w * c * factor * factor);
        for y in 0..h * factor {
            for xx in 0..w * factor {
                let i = ((y / factor) * w + xx / factor) * c;
                out.extend_from_slice(&src[i..i + c]);
            }
        }
        let value = Tensor::new([h * factor, w * factor, c], out)?;
        Ok(self.push(
            value,
            Op::UpsampleNearest {
                x: x.0,
                w,
                c,
                factor,
            },
            &[x.0],
        ))
    }

    /// Bilinear upsampling of `H x W x C` by an integer factor (half-pixel
    /// centres, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::shape("upsample_bilinear", &s, &[factor]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let taps = |o: usize, n: usize| -> (usize, usize, T) {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, lit(src - i0 as f64))
        };
        let (ho, wo) = (h * factor, w * factor);
        let mut b = SparseMap::builder(vec![ho, wo, c], h * w * c);
        for oy in 0..ho {
            let (y0, y1, fy) = taps(oy, h);
            for ox in 0..wo {
                let (x0, x1, fx) = taps(ox, w);
                for ch in 0..c {
                    let at = |y: usize, x: usize| (y * w + x) * c + ch;
                    b.push(at(y0, x0), (T::one() - fy) * (T::one() - fx));
                    b.push(at(y0, x1), (T::one() - fy) * fx);
                    b.push(at(y1, x0), fy * (T::one() - fx));
                    b.push(at(y1, x1), fy * fx);
                    b.end_row();
                }
            }
        }
        self.sparse(x, b.finish())
    }

    /// 3x3 mean filter over `H x W x C` with reflect padding.
    pub fn box_filter3(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("box_filter3", &s, &[3]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut out = vec![T::zero(); h * w * c];
        box3_forward(self.value(x).data(), &mut out, h, w, c);
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::BoxFilter3 { x: x.0, h, w, c }, &[x.0]))
    }

    /// Samples `src` (`H x W x C`) at continuous pixel coordinates
    /// `coords` (`Ho x Wo x 2`, column then row, pixel centres at integers).
    ///
    /// Returns the sampled values and a validity mask that is 1 where the
    /// whole interpolation support lies inside `src`; invalid outputs are 0.
    pub fn bilinear_sample(&mut self, src: Var, coords: Var) -> Result<(Var, Tensor<T>)> {
        let ss = self.shape(src).to_vec();
        let cs = self.shape(coords).to_vec();
        if ss.len() != 3 || cs.len() != 3 || cs[2] != 2 {
            return Err(Error::shape("bilinear_sample", &ss, &cs));
        }
        let (h, w, c) = (ss[0], ss[1], ss[2]);
        let (ho, wo) = (cs[0], cs[1]);
        let sv = self.value(src).data();
        let cv = self.value(coords).data();
        let mut out = vec![T::zero(); ho * wo * c];
        let mut mask = vec![T::zero(); ho * wo];
        for p in 0..ho * wo {
            let (Some((x0, x1, fx)), Some((y0, y1, fy))) = (cell(cv[2 * p], w), cell(cv[2 * p + 1], h))
            else {
                continue;
            };
            mask[p] = T::one();
            let (w00, w01) = ((T::one() - fy) * (T::one() - fx), (T::one() - fy) * fx);
            let (w10, w11) = (fy * (T::one() - fx), fy * fx);
            for ch in 0..c {
                let at = |y: usize, x: usize| sv[(y * w + x) * c + ch];
                out[p * c + ch] =
                    w00 * at(y0, x0) + w01 * at(y0, x1) + w10 * at(y1, x0) + w11 * at(y1, x1);
            }
        }
        let value = Tensor::new([ho, wo, c], out)?;
        let mask = Tensor::new([ho, wo], mask)?;
        let v = self.push(
            value,
            Op::BilinearSample {
                src: src.0,
                coords: coords.0,
            },
            &[src.0, coords.0],
        );
        Ok((v, mask))
    }

    /// Cross product over a trailing axis of extent 3.
    pub fn cross3(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.last() != Some(&3) {
            return Err(Error::shape("cross3", &sa, &sb));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); av.len()];
        for ((o, x), y) in out.chunks_mut(3).zip(av.chunks(3)).zip(bv.chunks(3)) {
            cross_into(o, x, y);
        }
        let value = Tensor::new(sa, out)?;
        Ok(self.push(value, Op::Cross3 { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Euclidean norm over the trailing axis.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| Error::Config("norm of a scalar".into()))?;
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(c.max(1))
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let value = Tensor::new(s[..s.len() - 1].to_vec(), out)?;
        Ok(self.push(value, Op::NormLast { x: x.0, c }, &[x.0]))
    }

    /// `x @ weight + bias` over the trailing axis.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}

#[inline]
fn cross_into<T: Scalar>(o: &mut [T], a: &[T], b: &[T]) {
    o[0] = a[1] * b[2] - a[2] * b[1];
    o[1] = a[2] * b[0] - a[0] * b[2];
    o[2] = a[0] * b[1] - a[1] * b[0];
}

/// Calls `f(dst_offset, src_offset)` for every in-bounds (patch, tap) pair.
fn for_each_patch(p: &UnfoldPlan, mut f: impl FnMut(usize, usize)) {
    let cols = p.window * p.window * p.d;
    for oy in 0..p.ho {
        for ox in 0..p.wo {
            let row = (oy * p.wo + ox) * cols;
            for ky in 0..p.window {
                let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                if iy < 0 || iy >= p.h as isize {
                    continue;
                }
                for kx in 0..p.window {
                    let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                    if ix < 0 || ix >= p.w as isize {
                        continue;
                    }
                    let dst = row + (ky * p.window + kx) * p.d;
                    let src = (iy as usize * p.w + ix as usize) * p.d;
                    f(dst, src);
                }
            }
        }
    }
}

/// Mirror index without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Separable 3x3 mean, rows then columns.
fn box3_forward<T: Scalar>(src: &[T], out: &mut [T], h: usize, w: usize, c: usize) {
    let third = lit::<T>(1.0 / 3.0);
    let mut tmp = vec![T::zero(); h * w * c];
    for y in 0..h {
        for x in 0..w {
            let (l, r) = (reflect(x as isize - 1, w), reflect(x as isize + 1, w));
            let row = y * w;
            for ch in 0..c {
                tmp[(row + x) * c + ch] =
                    (src[(row + l) * c + ch] + src[(row + x) * c + ch] + src[(row + r) * c + ch]) * third;
            }
        }
    }
    let stride = w * c;
    for y in 0..h {
        let (u, d) = (reflect(y as isize - 1, h), reflect(y as isize + 1, h));
        for i in 0..stride {
            out[y * stride + i] = (tmp[u * stride + i] + tmp[y * stride + i] + tmp[d * stride + i]) * third;
        }
    }
}

fn box3_backward<T: Scalar>(g: &[T], gx: &mut [T], h: usize, w: usize, c: usize) {
    let third = lit::<T>(1.0 / 3.0);
    let stride = w * c;
    let mut tmp = vec![T::zero(); h * stride];
    for y in 0..h {
        for dy in [-1isize, 0, 1] {
            let sy = reflect(y as isize + dy, h);
            for i in 0..stride {
                tmp[sy * stride + i] += g[y * stride + i] * third;
            }
        }
    }
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            for dx in [-1isize, 0, 1] {
                let sx = reflect(x as isize + dx, w);
                for ch in 0..c {
                    gx[(row + sx) * c + ch] += tmp[(row + x) * c + ch] * third;
                }
            }
        }
    }
}

fn acc<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    i: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[i].tracked {
        return None;
    }
    let n = nodes[i].value.numel();
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); n]))
}

pub(crate) fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    i: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |j: usize| nodes[j].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, ma, mb } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                for (o, &go) in g.iter().enumerate() {
                    let (ia, ib) = (ma.at(o), mb.at(o));
                    ga[ia] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => go,
                        BinaryKind::Mul => go * bv[ib],
                        BinaryKind::Div => go / bv[ib],
                    };
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (o, &go) in g.iter().enumerate() {
                    let (ia, ib) = (ma.at(o), mb.at(o));
                    gb[ib] += match kind {
                        BinaryKind::Add => go,
                        BinaryKind::Sub => -go,
                        BinaryKind::Mul => go * av[ia],
                        BinaryKind::Div => -go * av[ia] / (bv[ib] * bv[ib]),
                    };
                }
            }
        }
        Op::Unary { kind, x } => {
            let (xv, yv) = (val(*x), val(i));
            if let Some(gx) = acc(grads, nodes, *x) {
                for j in 0..g.len() {
                    gx[j] += g[j] * unary_grad(*kind, xv[j], yv[j]);
                }
            }
        }
        Op::Affine { x, scale } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d += *scale * s;
                }
            }
        }
        Op::Powf { x, p } => {
            let xv = val(*x);
            if let Some(gx) = acc(grads, nodes, *x) {
                for j in 0..g.len() {
                    gx[j] += g[j] * *p * xv[j].powf(*p - T::one());
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            if let Some(gx) = acc(grads, nodes, *x) {
                for j in 0..g.len() {
                    if xv[j] > *lo && xv[j] < *hi {
                        gx[j] += g[j];
                    }
                }
            }
        }
        Op::MinPair { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                for j in 0..g.len() {
                    if av[j] <= bv[j] {
                        ga[j] += g[j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for j in 0..g.len() {
                    if av[j] > bv[j] {
                        gb[j] += g[j];
                    }
                }
            }
        }
        Op::MatMul(p) => {
            let (av, bv) = (val(p.a), val(p.b));
            let (m, k, n) = (p.m, p.k, p.n);
            if let Some(ga) = acc(grads, nodes, p.a) {
                // dA = dC @ B^T, written through A's storage layout
                let (bs0, bs1) = p.b_strides();
                let gas = if p.ta { (1, m as isize) } else { (k as isize, 1) };
                for bi in 0..p.batch {
                    let ao = if p.a_batched { bi * m * k } else { 0 };
                    let bo = if p.b_batched { bi * k * n } else { 0 };
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..],
                        (n as isize, 1),
                        &bv[bo..],
                        (bs1, bs0),
                        T::one(),
                        &mut ga[ao..],
                        gas,
                    );
                }
            }
            if let Some(gb) = acc(grads, nodes, p.b) {
                // dB = A^T @ dC
                let (as0, as1) = p.a_strides();
                let gbs = if p.tb { (1, k as isize) } else { (n as isize, 1) };
                for bi in 0..p.batch {
                    let ao = if p.a_batched { bi * m * k } else { 0 };
                    let bo = if p.b_batched { bi * k * n } else { 0 };
                    T::gemm(
                        k,
                        m,
                        n,
                        &av[ao..],
                        (as1, as0),
                        &g[bi * m * n..],
                        (n as isize, 1),
                        T::one(),
                        &mut gb[bo..],
                        gbs,
                    );
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = val(i);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let base = o * len * inner + ii;
                        let mut dot = T::zero();
                        for j in 0..*len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..*len {
                            let at = base + j * inner;
                            gx[at] += y[at] * (g[at] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            w,
            b,
            d,
            xhat,
            rstd,
        } => {
            let d = *d;
            let wv = val(*w);
            let rows = rstd.len();
            if let Some(gw) = acc(grads, nodes, *w) {
                for r in 0..rows {
                    for j in 0..d {
                        gw[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let dn = lit::<T>(d as f64);
                for r in 0..rows {
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..d {
                        let dxh = g[r * d + j] * wv[j];
                        s1 += dxh;
                        s2 += dxh * xhat[r * d + j];
                    }
                    for j in 0..d {
                        let dxh = g[r * d + j] * wv[j];
                        gx[r * d + j] += rstd[r] * (dxh - (s1 + xhat[r * d + j] * s2) / dn);
                    }
                }
            }
        }
        Op::SumAll { x } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
        }
        Op::SumAxis {
            x,
            outer,
            len,
            inner,
        } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..*outer {
                    for j in 0..*len {
                        let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Op::Concat { xs, outer, slabs } => {
            let width: usize = slabs.iter().sum();
            let mut off = 0;
            for (&x, &slab) in xs.iter().zip(slabs) {
                if let Some(gx) = acc(grads, nodes, x) {
                    for o in 0..*outer {
                        let src = &g[o * width + off..o * width + off + slab];
                        for (d, &s) in gx[o * slab..(o + 1) * slab].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                off += slab;
            }
        }
        Op::Narrow {
            x,
            outer,
            slab_in,
            offset,
            slab_out,
        } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..*outer {
                    let dst = &mut gx[o * slab_in + offset..o * slab_in + offset + slab_out];
                    for (d, &s) in dst.iter_mut().zip(&g[o * slab_out..(o + 1) * slab_out]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Sparse { x, map } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                map.apply_transpose(g, gx);
            }
        }
        Op::BoxFilter3 { x, h, w, c } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                box3_backward(g, gx, *h, *w, *c);
            }
        }
        Op::Unfold(p) => {
            if let Some(gx) = acc(grads, nodes, p.x) {
                let d = p.d;
                for_each_patch(p, |dst, src| {
                    for c in 0..d {
                        gx[src + c] += g[dst + c];
                    }
                });
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (&a, &s) in argmax.iter().zip(g) {
                    gx[a] += s;
                }
            }
        }
        Op::UpsampleNearest {
            x,
            w,
            c,
            factor,
        } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let (w, c, f) = (*w, *c, *factor);
                for (o, chunk) in g.chunks(c).enumerate() {
                    let (y, xx) = (o / (w * f), o % (w * f));
                    let base = ((y / f) * w + xx / f) * c;
                    for ch in 0..c {
                        gx[base + ch] += chunk[ch];
                    }
                }
            }
        }
        Op::BilinearSample { src, coords } => {
            let ss = nodes[*src].value.shape();
            let (h, w, c) = (ss[0], ss[1], ss[2]);
            let sv = val(*src);
            let cv = val(*coords);
            let np = cv.len() / 2;
            let track_src = nodes[*src].tracked;
            let track_coords = nodes[*coords].tracked;
            let mut gsrc = if track_src { Some(vec![T::zero(); sv.len()]) } else { None };
            let mut gcoords = if track_coords { Some(vec![T::zero(); cv.len()]) } else { None };
            for p in 0..np {
                let (Some((x0, x1, fx)), Some((y0, y1, fy))) =
                    (cell(cv[2 * p], w), cell(cv[2 * p + 1], h))
                else {
                    continue;
                };
                let (mut du, mut dv) = (T::zero(), T::zero());
                for ch in 0..c {
                    let go = g[p * c + ch];
                    let at = |y: usize, x: usize| (y * w + x) * c + ch;
                    if let Some(gs) = gsrc.as_mut() {
                        gs[at(y0, x0)] += go * (T::one() - fy) * (T::one() - fx);
                        gs[at(y0, x1)] += go * (T::one() - fy) * fx;
                        gs[at(y1, x0)] += go * fy * (T::one() - fx);
                        gs[at(y1, x1)] += go * fy * fx;
                    }
                    let (s00, s01, s10, s11) =
                        (sv[at(y0, x0)], sv[at(y0, x1)], sv[at(y1, x0)], sv[at(y1, x1)]);
                    if x1 != x0 {
                        du += go * ((T::one() - fy) * (s01 - s00) + fy * (s11 - s10));
                    }
                    if y1 != y0 {
                        dv += go * ((T::one() - fx) * (s10 - s00) + fx * (s11 - s01));
                    }
                }
                if let Some(gc) = gcoords.as_mut() {
                    gc[2 * p] += du;
                    gc[2 * p + 1] += dv;
                }
            }
            if let (Some(gs), Some(dst)) = (gsrc, acc(grads, nodes, *src)) {
                for (d, s) in dst.iter_mut().zip(gs) {
                    *d += s;
                }
            }
            if let (Some(gc), Some(dst)) = (gcoords, acc(grads, nodes, *coords)) {
                for (d, s) in dst.iter_mut().zip(gc) {
                    *d += s;
                }
            }
        }
        Op::Cross3 { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let mut tmp = [T::zero(); 3];
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((d, go), y) in ga.chunks_mut(3).zip(g.chunks(3)).zip(bv.chunks(3)) {
                    cross_into(&mut tmp, y, go);
                    for k in 0..3 {
                        d[k] += tmp[k];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((d, go), x) in gb.chunks_mut(3).zip(g.chunks(3)).zip(av.chunks(3)) {
                    cross_into(&mut tmp, go, x);
                    for k in 0..3 {
                        d[k] += tmp[k];
                    }
                }
            }
        }
        Op::NormLast { x, c } => {
            let (xv, yv) = (val(*x), val(i));
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, (&go, &y)) in g.iter().zip(yv).enumerate() {
                    if y > T::zero() {
                        for j in 0..*c {
                            gx[r * c + j] += go * xv[r * c + j] / y;
                        }
                    }
                }
            }
        }
    }
}
