//! Eager tape with reverse-mode differentiation.
//!
//! Every op computes its value immediately and, when tracking is enabled,
//! records the inputs it needs for the backward sweep. Nodes are appended in
//! topological order, so the backward pass is a single reverse scan.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::value::{Real, Tensor};
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Ln,
    Sigmoid,
    Relu,
    Gelu,
    Softplus,
    Tanh,
    Square,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Binary(Binary, Var, Var),
    Scale(Var, T),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Unary(Unary, Var),
    Softmax(Var),
    LayerNorm(Var, T),
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    Resize { input: Var, c: usize, h: usize, w: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    BroadcastTo(Var),
    Rope { input: Var, cos: Vec<T>, sin: Vec<T> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Computation graph. Cheap to create; build one per forward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    track: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records ops for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track: true,
        }
    }

    /// A graph that only evaluates; nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        let grad = grad && self.track;
        let op = if grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Differentiable leaf (gradient checks, inputs under test).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Detached copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Leaf bound to a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id).clone();
        let v = self.push(t, Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or(TensorError::Shape {
            op: name,
            shapes: vec![sa.clone(), sb.clone()],
        })?;
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if sb.len() <= 1 && bv.len() == 1 && out_shape == sa {
            av.iter().map(|&x| f(x, bv[0])).collect()
        } else {
            let ma = kernels::broadcast_map(&out_shape, &sa);
            let mb = kernels::broadcast_map(&out_shape, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(av[i], bv[j])).collect()
        };
        let grad = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(kind, a, b), grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Div, a, b, "div")
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let t = self.value(a).map(|x| x * k);
        let grad = self.needs(&[a]);
        self.push(t, Op::Scale(a, k), grad)
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let t = self.value(a).map(|x| x + k);
        let grad = self.needs(&[a]);
        self.push(t, Op::Offset(a), grad)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -T::one());
        self.add_scalar(n, T::one())
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f = |x: T| match kind {
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Gelu => kernels::gelu(x),
            Unary::Softplus => kernels::softplus(x),
            Unary::Tanh => x.tanh(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
        };
        let t = self.value(a).map(f);
        let grad = self.needs(&[a]);
        self.push(t, Op::Unary(kind, a), grad)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    // ── linear algebra / layout ──────────────────────────────────────

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                shapes: vec![sa.to_vec(), sb.to_vec()],
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let grad = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), grad))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                shapes: vec![s.to_vec()],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let grad = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), grad))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let grad = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a), grad))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        match kernels::broadcast_shape(&s, shape) {
            Some(out) if out == shape => {}
            _ => {
                return Err(TensorError::Shape {
                    op: "broadcast_to",
                    shapes: vec![s, shape.to_vec()],
                })
            }
        }
        let map = kernels::broadcast_map(shape, &s);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let grad = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(a), grad))
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::Shape {
                op: "narrow",
                shapes: vec![s, vec![axis, start, len]],
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let grad = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { input: a, axis, start }, grad))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(*inputs.first().ok_or(TensorError::Shape {
            op: "concat",
            shapes: vec![],
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(TensorError::Shape {
                op: "concat",
                shapes: vec![first],
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    shapes: inputs.iter().map(|&v| self.shape(v).to_vec()).collect(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let grad = self.needs(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            grad,
        ))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let grad = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), grad)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len().max(1)).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Shape {
                op: "sum_axis",
                shapes: vec![s],
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..s[axis] {
                let base = (o * s[axis] + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let grad = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SumAxis { input: a, axis }, grad))
    }

    // ── neural-net ops ───────────────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let grad = self.needs(&[a]);
        self.push(t, Op::Softmax(a), grad)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().unwrap_or(&1);
        let n = T::from_usize(cols).unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let grad = self.needs(&[a]);
        self.push(t, Op::LayerNorm(a, eps), grad)
    }

    /// 2-D convolution of `input: [cin,h,w]` with `weight: [cout,cin,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        let err = || TensorError::Shape {
            op: "conv2d",
            shapes: vec![si.clone(), sw.clone()],
        };
        if si.len() != 3 || sw.len() != 4 || si[0] != sw[1] {
            return Err(err());
        }
        let geom = ConvGeom::new(si[0], si[1], si[2], sw[2], sw[3], stride, pad).ok_or_else(err)?;
        let cout = sw[0];
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let mut out = vec![T::zero(); cout * geom.col_cols()];
        kernels::gemm_nn(self.value(weight).data(), &cols, &mut out, cout, geom.col_rows(), geom.col_cols());
        let grad = self.needs(&[input, weight]);
        Ok(self.push(
            Tensor::new(vec![cout, geom.ho, geom.wo], out)?,
            Op::Conv2d { input, weight, geom },
            grad,
        ))
    }

    /// Bilinear resize of `[c,h,w]` to `[c,ho,wo]` (half-pixel centers).
    pub fn resize_bilinear(&mut self, a: Var, ho: usize, wo: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || ho == 0 || wo == 0 {
            return Err(TensorError::Shape {
                op: "resize_bilinear",
                shapes: vec![s, vec![ho, wo]],
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = kernels::bilinear(self.value(a).data(), c, h, w, ho, wo);
        let grad = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![c, ho, wo], out)?, Op::Resize { input: a, c, h, w }, grad))
    }

    /// Rotates consecutive feature pairs of each row of `a: [n,d]` by the
    /// given per-row, per-pair angles (`cos`/`sin` are `[n, d/2]`).
    pub fn rotate_pairs(&mut self, a: Var, cos: Vec<T>, sin: Vec<T>) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] % 2 != 0 || cos.len() != s[0] * s[1] / 2 || sin.len() != cos.len() {
            return Err(TensorError::Shape {
                op: "rope",
                shapes: vec![s, vec![cos.len()]],
            });
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for p in 0..cos.len() {
            let (x0, x1) = (src[2 * p], src[2 * p + 1]);
            out[2 * p] = x0 * cos[p] - x1 * sin[p];
            out[2 * p + 1] = x0 * sin[p] + x1 * cos[p];
        }
        let grad = self.needs(&[a]);
        Ok(self.push(Tensor::new(s, out)?, Op::Rope { input: a, cos, sin }, grad))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !lt.item().is_finite() {
            return Err(TensorError::NonFiniteLoss);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Vec::new();
        let mut out: Vec<Option<Tensor<T>>> = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            let t = g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"));
            if let (Op::Param(id), Some(_)) = (&self.nodes[i].op, &t) {
                params.push((*id, i));
            }
            out.push(t);
        }
        Ok(Gradients { grads: out, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ma = kernels::broadcast_map(out.shape(), sa);
                let mb = kernels::broadcast_map(out.shape(), sb);
                let kind = *kind;
                self.accumulate(grads, *a, |ga| {
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gk,
                            Binary::Mul => gk * bv[mb[k]],
                            Binary::Div => gk / bv[mb[k]],
                        };
                        ga[ma[k]] += d;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * av[ma[k]],
                            Binary::Div => {
                                let y = bv[mb[k]];
                                -gk * av[ma[k]] / (y * y)
                            }
                        };
                        gb[mb[k]] += d;
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, |ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv * k;
                    }
                });
            }
            Op::Offset(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
            }
            Op::BroadcastTo(a) => {
                let map = kernels::broadcast_map(out.shape(), self.shape(*a));
                self.accumulate(grads, *a, |ga| {
                    for (k, &gv) in g.iter().enumerate() {
                        ga[map[k]] += gv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| kernels::gemm_nt(g, bv, ga, m, n, k));
                self.accumulate(grads, *b, |gb| kernels::gemm_tn(av, g, gb, k, m, n));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = out.data();
                let kind = *kind;
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        let d = match kind {
                            Unary::Exp => y[k],
                            Unary::Ln => T::one() / x[k],
                            Unary::Sigmoid => y[k] * (T::one() - y[k]),
                            Unary::Relu => {
                                if x[k] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Gelu => kernels::gelu_grad(x[k]),
                            Unary::Softplus => kernels::sigmoid(x[k]),
                            Unary::Tanh => T::one() - y[k] * y[k],
                            Unary::Square => x[k] + x[k],
                            Unary::Sqrt => T::from_f64c(0.5) / y[k],
                        };
                        ga[k] += g[k] * d;
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = (*out.shape().last().unwrap_or(&1)).max(1);
                let y = out.data();
                self.accumulate(grads, *a, |ga| {
                    for r in 0..y.len() / cols {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(a, eps) => {
                let cols = (*out.shape().last().unwrap_or(&1)).max(1);
                let n = T::from_usize(cols).unwrap();
                let x = self.value(*a).data();
                let y = out.data();
                let eps = *eps;
                self.accumulate(grads, *a, |ga| {
                    for r in 0..y.len() / cols {
                        let xr = &x[r * cols..(r + 1) * cols];
                        let mean = xr.iter().copied().sum::<T>() / n;
                        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                        let rstd = T::one() / (var + eps).sqrt();
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let gm = gr.iter().copied().sum::<T>() / n;
                        let gym = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / n;
                        for c in 0..cols {
                            ga[r * cols + c] += rstd * (gr[c] - gm - yr[c] * gym);
                        }
                    }
                });
            }
            Op::Conv2d { input, weight, geom } => {
                let cout = self.shape(*weight)[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                if self.nodes[weight.0].grad {
                    let cols = kernels::im2col(self.value(*input).data(), geom);
                    self.accumulate(grads, *weight, |gw| kernels::gemm_nt(g, &cols, gw, cout, ncols, rows));
                }
                if self.nodes[input.0].grad {
                    let mut dcols = vec![T::zero(); rows * ncols];
                    kernels::gemm_tn(self.value(*weight).data(), g, &mut dcols, rows, cout, ncols);
                    self.accumulate(grads, *input, |gi| kernels::col2im(&dcols, geom, gi));
                }
            }
            Op::Resize { input, c, h, w } => {
                let s = out.shape();
                let (ho, wo) = (s[1], s[2]);
                let (c, h, w) = (*c, *h, *w);
                self.accumulate(grads, *input, |gi| kernels::bilinear_adjoint(g, c, h, w, ho, wo, gi));
            }
            Op::Narrow { input, axis, start } => {
                let s = self.shape(*input);
                let len = out.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let full = s[*axis];
                let start = *start;
                self.accumulate(grads, *input, |gi| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for k in 0..len * inner {
                            gi[dst + k] += g[src + k];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    self.accumulate(grads, v, |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for k in 0..len * inner {
                                gv[dst + k] += g[src + k];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += g0;
                    }
                });
            }
            Op::SumAxis { input, axis } => {
                let s = self.shape(*input);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let n = s[*axis];
                self.accumulate(grads, *input, |gi| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                gi[(o * n + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Rope { input, cos, sin } => {
                self.accumulate(grads, *input, |gi| {
                    for p in 0..cos.len() {
                        let (g0, g1) = (g[2 * p], g[2 * p + 1]);
                        gi[2 * p] += g0 * cos[p] + g1 * sin[p];
                        gi[2 * p + 1] += -g0 * sin[p] + g1 * cos[p];
                    }
                });
            }
        }
    }
}

/// Adjoints from one backward sweep.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` is not on a
    /// differentiable path to the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with zeros substituted for disconnected nodes.
    pub fn wrt_or_zero(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(move |&(id, i)| self.grads[i].as_ref().map(|t| (id, t)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, i)| self.grads[i].as_ref())
    }
}
