//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the tape in reverse and accumulates gradients into the nodes that require
//! them. Parameters enter the tape once per graph via [`Graph::param`], so a
//! weight used by both siamese branches receives the sum of both gradients.

use std::collections::HashMap;

use super::conv::{conv2d_backward, conv2d_forward};
use super::{MatMut, MatRef, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{config_err, Error, Result};

/// A tracked tensor on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Sum(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Upsample2x(Var),
    StraightThrough(Var),
    /// Scalar-valued op whose local gradients were computed in the forward pass.
    Custom { inputs: Vec<Var>, grads: Vec<Tensor<T>> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

/// The activation used throughout: `x * sigmoid(x)`.
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Row-wise softmax of an `(N, M)` matrix with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = m.dims2()?;
    m.ensure_finite("softmax input")?;
    let mut out = m.clone();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

fn matmul_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(config_err!("matmul inner extents differ: {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); n * m];
    T::gemm(T::one(), MatRef::row_major(a.data(), n, k), MatRef::row_major(b.data(), k, m), T::zero(), MatMut::row_major(&mut out, n, m));
    Tensor::new([n, m], out)
}

fn transpose_values<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    let src = a.data();
    Ok(Tensor::from_fn([c, r], |i| src[(i % r) * c + i / r]))
}

fn upsample2x_values<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = a.dims3()?;
    let src = a.data();
    let (oh, ow) = (2 * h, 2 * w);
    Ok(Tensor::from_fn([c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let y = (i / ow) % oh;
        let x = i % ow;
        src[(ch * h + y / 2) * w + x / 2]
    }))
}

fn zip_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(config_err!("{what}: shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{what} produced a non-finite value")));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Conv2d { x, w, b, .. } => [x, w, b].iter().any(|v| self.nodes[v.0].requires_grad),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::Sum(a)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::Reshape(a)
            | Op::Upsample2x(a)
            | Op::StraightThrough(a) => self.nodes[a.0].requires_grad,
            Op::Concat(vs) => vs.iter().any(|v| self.nodes[v.0].requires_grad),
            Op::Custom { inputs, .. } => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf whose gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter as a tracked leaf; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&id, &v)| (id, v))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        self.push(out, Op::Conv2d { x, w, b, stride, padding }, "conv2d")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_values(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_values(self.value(a), self.value(b), "subtract", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "subtract")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_values(self.value(a), self.value(b), "multiply", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "multiply")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), "scale")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(silu);
        self.push(v, Op::Silu(a), "activation")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_values(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = transpose_values(self.value(a))?;
        self.push(v, Op::Transpose(a), "transpose")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows(self.value(a))?;
        self.push(v, Op::SoftmaxRows(a), "softmax")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    /// Channel concatenation of `(C_i, H, W)` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let v = Tensor::concat_channels(&values)?;
        self.push(v, Op::Concat(parts.to_vec()), "concat")
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let v = upsample2x_values(self.value(a))?;
        self.push(v, Op::Upsample2x(a), "upsample")
    }

    /// Replaces the forward value (e.g. by its quantized reconstruction) while
    /// passing gradients through unchanged.
    pub fn straight_through(&mut self, a: Var, forward: Tensor<T>) -> Result<Var> {
        if forward.shape() != self.shape(a) {
            return Err(config_err!("straight-through value shape {:?} vs {:?}", forward.shape(), self.shape(a)));
        }
        self.push(forward, Op::StraightThrough(a), "straight-through")
    }

    /// Scalar op with externally computed local gradients `d value / d inputs[i]`.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: T, grads: Vec<Tensor<T>>) -> Result<Var> {
        if grads.len() != inputs.len() {
            return Err(config_err!("custom op has {} inputs but {} gradients", inputs.len(), grads.len()));
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if g.shape() != self.shape(*v) {
                return Err(config_err!("custom op gradient shape {:?} vs input {:?}", g.shape(), self.shape(*v)));
            }
        }
        self.push(Tensor::scalar(value), Op::Custom { inputs: inputs.to_vec(), grads }, "custom op")
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(config_err!("backward needs a scalar root, got shape {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, padding } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), self.value(*w), self.value(*b), *stride, *padding, g, self.wants(*x))?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_values(g, bv, "mul grad", |x, y| x * y)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_values(g, av, "mul grad", |x, y| x * y)?);
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * *f)),
            Op::Silu(a) => {
                let d = zip_values(g, self.value(*a), "silu grad", |gv, x| gv * silu_grad(x))?;
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a).to_vec(), gv));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = av.dims2()?;
                let (_, m) = bv.dims2()?;
                if self.wants(*a) {
                    let mut da = vec![T::zero(); n * k];
                    T::gemm(T::one(), MatRef::row_major(g.data(), n, m), MatRef::transposed(bv.data(), k, m), T::zero(), MatMut::row_major(&mut da, n, k));
                    self.accumulate(grads, *a, Tensor::new([n, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * m];
                    T::gemm(T::one(), MatRef::transposed(av.data(), n, k), MatRef::row_major(g.data(), n, m), T::zero(), MatMut::row_major(&mut db, k, m));
                    self.accumulate(grads, *b, Tensor::new([k, m], db)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose_values(g)?),
            Op::SoftmaxRows(a) => {
                let (_, cols) = out.dims2()?;
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(cols).zip(out.data().chunks(cols)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&gv, &y)| gv * y).sum();
                    for (dv, &y) in drow.iter_mut().zip(yrow) {
                        *dv = y * (*dv - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.clone().reshape(self.shape(*a).to_vec())?),
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[0];
                    if self.wants(p) {
                        self.accumulate(grads, p, g.channels(start, start + c)?);
                    }
                    start += c;
                }
            }
            Op::Upsample2x(a) => {
                let (c, h, w) = self.value(*a).dims3()?;
                let ow = 2 * w;
                let src = g.data();
                let d = Tensor::from_fn([c, h, w], |i| {
                    let ch = i / (h * w);
                    let y = (i / w) % h;
                    let x = i % w;
                    let base = (ch * 2 * h + 2 * y) * ow + 2 * x;
                    src[base] + src[base + 1] + src[base + ow] + src[base + ow + 1]
                });
                self.accumulate(grads, *a, d);
            }
            Op::StraightThrough(a) => self.accumulate(grads, *a, g.clone()),
            Op::Custom { inputs, grads: local } => {
                let gv = g.data()[0];
                for (v, lg) in inputs.iter().zip(local) {
                    self.accumulate(grads, *v, lg.map(|x| x * gv));
                }
            }
        }
        Ok(())
    }
}

/// Result of a reverse pass: gradients of tracked leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every parameter bound on `graph`, in store order; unused parameters get zeros.
    pub fn for_params(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        for (id, var) in graph.bound_params() {
            if let Some(g) = self.get(var) {
                out[id.index()] = g.clone();
            }
        }
        out
    }
}
