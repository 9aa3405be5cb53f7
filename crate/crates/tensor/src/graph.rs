//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every op applied to its [`Var`]s; [`Graph::backward`]
//! walks the tape in reverse. Graphs are built per forward pass and dropped
//! afterwards, so parameters enter as leaves wrapping shared `Arc` tensors.

use std::cell::RefCell;
use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::{Scalar, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Sqr(usize),
    Silu(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    SumAll(usize),
    MeanAll(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Upsample2x(usize),
    ConcatChannels(Vec<usize>),
    SliceChannels { x: usize, start: usize },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, eps: f64 },
    AddChannelBias(usize, usize),
    AddRowBias(usize, usize),
    Bmm(usize, usize),
    TransposeLast2(usize),
    SoftmaxLast(usize),
    Reshape(usize),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf sharing storage with a parameter tensor.
    pub fn leaf(&self, t: Arc<Tensor<T>>, trainable: bool) -> Var<'_, T> {
        self.push_arc(t, Op::Leaf, trainable)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Channel-axis concatenation of 4-D tensors.
    pub fn concat_channels<'g>(&'g self, parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|p| self.value(p.id)).collect();
        let (n, _, h, w) = vals[0].dims4();
        let ctot: usize = vals.iter().map(|v| v.dims4().1).sum();
        let mut out = Vec::with_capacity(n * ctot * h * w);
        for i in 0..n {
            for v in &vals {
                let (vn, c, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat_channels shape mismatch");
                out.extend_from_slice(&v.data()[i * c * h * w..(i + 1) * c * h * w]);
            }
        }
        let needs = parts.iter().any(|p| self.needs(p.id));
        self.push(
            Tensor::from_vec(vec![n, ctot, h, w], out),
            Op::ConcatChannels(parts.iter().map(|p| p.id).collect()),
            needs,
        )
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::from_vec(nodes[loss.id].value.shape().to_vec(), vec![T::one()]));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| nodes[i].value.clone();
            let need = |i: usize| nodes[i].needs_grad;
            let mut acc = |i: usize, t: Tensor<T>| {
                if !nodes[i].needs_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(e) => e.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match node.op.clone() {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if need(b) {
                        acc(b, g.clone());
                    }
                    acc(a, g);
                }
                Op::Sub(a, b) => {
                    if need(b) {
                        acc(b, g.map(|v| -v));
                    }
                    acc(a, g);
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        acc(a, g.zip_map(&val(b), |g, y| g * y));
                    }
                    if need(b) {
                        acc(b, g.zip_map(&val(a), |g, x| g * x));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(b);
                    if need(a) {
                        acc(a, g.zip_map(&bv, |g, y| g / y));
                    }
                    if need(b) {
                        let q = node.value.zip_map(&bv, |q, y| q / y);
                        acc(b, g.zip_map(&q, |g, q| -g * q));
                    }
                }
                Op::Scale(a, c) => {
                    let c = T::of(c);
                    acc(a, g.map(|v| v * c));
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let shape = val(a).shape().to_vec();
                    acc(a, g.reshape(shape));
                }
                Op::Exp(a) => acc(a, g.zip_map(&node.value, |g, y| g * y)),
                Op::Log(a) => acc(a, g.zip_map(&val(a), |g, x| g / x)),
                Op::Abs(a) => acc(
                    a,
                    g.zip_map(&val(a), |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    }),
                ),
                Op::Sqr(a) => acc(a, g.zip_map(&val(a), |g, x| g * x * T::of(2.0))),
                Op::Silu(a) => acc(
                    a,
                    g.zip_map(&val(a), |g, x| {
                        let s = T::one() / (T::one() + (-x).exp());
                        g * s * (T::one() + x * (T::one() - s))
                    }),
                ),
                Op::Relu(a) => acc(a, g.zip_map(&val(a), |g, x| if x > T::zero() { g } else { T::zero() })),
                Op::LeakyRelu(a, s) => {
                    let s = T::of(s);
                    acc(a, g.zip_map(&val(a), |g, x| if x > T::zero() { g } else { g * s }))
                }
                Op::SumAll(a) => {
                    let x = val(a);
                    acc(a, Tensor::full(x.shape().to_vec(), g.data()[0]));
                }
                Op::MeanAll(a) => {
                    let x = val(a);
                    let v = g.data()[0] / T::of(x.numel() as f64);
                    acc(a, Tensor::full(x.shape().to_vec(), v));
                }
                Op::Conv2d { x, w, b, geom } => {
                    let r = kernels::conv2d_backward(
                        &val(x),
                        &val(w),
                        &g,
                        &geom,
                        (need(x), need(w), b.is_some_and(need)),
                    );
                    if let Some(dx) = r.dx {
                        acc(x, dx);
                    }
                    if let Some(dw) = r.dw {
                        acc(w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, r.db) {
                        acc(b, db);
                    }
                }
                Op::Upsample2x(a) => {
                    let x = val(a);
                    let (n, c, h, w) = x.dims4();
                    let mut d = vec![T::zero(); x.numel()];
                    let gd = g.data();
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let src = gd[p * 4 * h * w + y * 2 * w + xx];
                                let dst = &mut d[p * h * w + (y / 2) * w + xx / 2];
                                *dst = *dst + src;
                            }
                        }
                    }
                    acc(a, Tensor::from_vec(x.shape().to_vec(), d));
                }
                Op::ConcatChannels(parts) => {
                    let (n, ctot, h, w) = g.dims4();
                    let mut offset = 0;
                    for p in parts {
                        let c = val(p).dims4().1;
                        if need(p) {
                            let mut d = Vec::with_capacity(n * c * h * w);
                            for i in 0..n {
                                let start = (i * ctot + offset) * h * w;
                                d.extend_from_slice(&g.data()[start..start + c * h * w]);
                            }
                            acc(p, Tensor::from_vec(vec![n, c, h, w], d));
                        }
                        offset += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let xv = val(x);
                    let (n, c, h, w) = xv.dims4();
                    let len = g.dims4().1;
                    let mut d = vec![T::zero(); xv.numel()];
                    for i in 0..n {
                        let dst = (i * c + start) * h * w;
                        let src = i * len * h * w;
                        d[dst..dst + len * h * w].copy_from_slice(&g.data()[src..src + len * h * w]);
                    }
                    acc(x, Tensor::from_vec(xv.shape().to_vec(), d));
                }
                Op::GroupNorm { x, gamma, beta, groups, eps } => {
                    let (dx, dg, db) = kernels::group_norm_backward(&val(x), &val(gamma), &g, groups, eps);
                    acc(x, dx);
                    acc(gamma, dg);
                    acc(beta, db);
                }
                Op::AddChannelBias(x, v) => {
                    if need(v) {
                        let (n, c, h, w) = g.dims4();
                        let d: Vec<T> =
                            (0..n * c).map(|p| g.data()[p * h * w..(p + 1) * h * w].iter().copied().sum()).collect();
                        acc(v, Tensor::from_vec(vec![n, c], d));
                    }
                    acc(x, g);
                }
                Op::AddRowBias(x, b) => {
                    if need(b) {
                        let cols = *g.shape().last().unwrap();
                        let mut d = vec![T::zero(); cols];
                        for row in g.data().chunks(cols) {
                            for (a, &v) in d.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                        acc(b, Tensor::from_vec(vec![cols], d));
                    }
                    acc(x, g);
                }
                Op::Bmm(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let g3 = g.clone().reshape(vec![kernels::dims3(&g).0, kernels::dims3(&g).1, kernels::dims3(&g).2]);
                    if need(a) {
                        let d = kernels::bmm(&g3, false, &bv, true);
                        acc(a, d.reshape(av.shape().to_vec()));
                    }
                    if need(b) {
                        let d = kernels::bmm(&av, true, &g3, false);
                        acc(b, d.reshape(bv.shape().to_vec()));
                    }
                }
                Op::TransposeLast2(a) => acc(a, transpose_last2(&g)),
                Op::SoftmaxLast(a) => {
                    let y = &node.value;
                    let cols = *y.shape().last().unwrap();
                    let mut d = vec![T::zero(); y.numel()];
                    for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.data().chunks(cols)).zip(g.data().chunks(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    acc(a, Tensor::from_vec(y.shape().to_vec(), d));
                }
            }
        }
        drop(nodes);
        Grads { grads }
    }
}

fn transpose_last2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (b, m, n) = kernels::dims3(t);
    let mut out = vec![T::zero(); t.numel()];
    for i in 0..b {
        for r in 0..m {
            for c in 0..n {
                out[i * m * n + c * m + r] = t.data()[i * m * n + r * n + c];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let l = shape.len();
    shape.swap(l - 1, l - 2);
    Tensor::from_vec(shape, out)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn unary(self, op: Op, f: impl Fn(T) -> T) -> Self {
        let out = self.value().map(f);
        self.graph.push(out, op, self.requires_grad())
    }

    fn binary(self, other: Self, op: Op, f: impl Fn(T, T) -> T) -> Self {
        let out = self.value().zip_map(&other.value(), f);
        let needs = self.requires_grad() || other.requires_grad();
        self.graph.push(out, op, needs)
    }

    pub fn add(self, other: Self) -> Self {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Self {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Self) -> Self {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Self) -> Self {
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Self {
        let ct = T::of(c);
        self.unary(Op::Scale(self.id, c), |v| v * ct)
    }

    pub fn neg(self) -> Self {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let ct = T::of(c);
        self.unary(Op::AddScalar(self.id), |v| v + ct)
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), |v| v.exp())
    }

    pub fn log(self) -> Self {
        self.unary(Op::Log(self.id), |v| v.ln())
    }

    pub fn abs(self) -> Self {
        self.unary(Op::Abs(self.id), |v| v.abs())
    }

    pub fn sqr(self) -> Self {
        self.unary(Op::Sqr(self.id), |v| v * v)
    }

    pub fn silu(self) -> Self {
        self.unary(Op::Silu(self.id), |v| v / (T::one() + (-v).exp()))
    }

    pub fn relu(self) -> Self {
        self.unary(Op::Relu(self.id), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let s = T::of(slope);
        self.unary(Op::LeakyRelu(self.id, slope), |v| if v > T::zero() { v } else { v * s })
    }

    pub fn sum_all(self) -> Self {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id), self.requires_grad())
    }

    pub fn mean_all(self) -> Self {
        let m = self.value().mean();
        self.graph.push(Tensor::scalar(m), Op::MeanAll(self.id), self.requires_grad())
    }

    /// 2-D convolution; `w` is `[out, in / groups, kh, kw]`.
    pub fn conv2d(self, w: Self, b: Option<Self>, stride: usize, pad: usize, groups: usize) -> Self {
        let (xv, wv) = (self.value(), w.value());
        let geom = ConvGeom::new(xv.shape(), wv.shape(), stride, pad, groups);
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            assert_eq!(bv.shape(), &[geom.cout], "conv bias shape");
        }
        let out = kernels::conv2d_forward(&xv, &wv, bv.as_deref(), &geom);
        let needs = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.graph.push(out, Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom }, needs)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(self) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let mut out = vec![T::zero(); x.numel() * 4];
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = x.data()[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        self.graph.push(Tensor::from_vec(vec![n, c, 2 * h, 2 * w], out), Op::Upsample2x(self.id), self.requires_grad())
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(start + len <= c, "channel slice {start}+{len} out of {c}");
        let mut out = Vec::with_capacity(n * len * h * w);
        for i in 0..n {
            let s = (i * c + start) * h * w;
            out.extend_from_slice(&x.data()[s..s + len * h * w]);
        }
        self.graph.push(
            Tensor::from_vec(vec![n, len, h, w], out),
            Op::SliceChannels { x: self.id, start },
            self.requires_grad(),
        )
    }

    pub fn group_norm(self, gamma: Self, beta: Self, groups: usize, eps: f64) -> Self {
        let out = kernels::group_norm_forward(&self.value(), &gamma.value(), &beta.value(), groups, eps);
        let needs = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.graph.push(out, Op::GroupNorm { x: self.id, gamma: gamma.id, beta: beta.id, groups, eps }, needs)
    }

    /// `x[n, c, :, :] += v[n, c]`.
    pub fn add_channel_bias(self, v: Self) -> Self {
        let (x, vv) = (self.value(), v.value());
        let (n, c, h, w) = x.dims4();
        assert_eq!(vv.shape(), &[n, c], "channel bias shape");
        let mut out = x.as_ref().clone();
        for (p, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let b = vv.data()[p];
            for o in chunk {
                *o = *o + b;
            }
        }
        let needs = self.requires_grad() || v.requires_grad();
        self.graph.push(out, Op::AddChannelBias(self.id, v.id), needs)
    }

    /// `x[.., j] += b[j]` over the last axis.
    pub fn add_row_bias(self, b: Self) -> Self {
        let (x, bv) = (self.value(), b.value());
        let cols = *x.shape().last().unwrap();
        assert_eq!(bv.shape(), &[cols], "row bias shape");
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        let needs = self.requires_grad() || b.requires_grad();
        self.graph.push(out, Op::AddRowBias(self.id, b.id), needs)
    }

    /// Matrix product over the last two axes (2-D or batched 3-D).
    pub fn matmul(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let out = kernels::bmm(&a, false, &b, false);
        let out = if a.shape().len() == 2 {
            let (_, m, n) = kernels::dims3(&out);
            out.reshape(vec![m, n])
        } else {
            out
        };
        let needs = self.requires_grad() || other.requires_grad();
        self.graph.push(out, Op::Bmm(self.id, other.id), needs)
    }

    pub fn transpose_last2(self) -> Self {
        let out = transpose_last2(&self.value());
        self.graph.push(out, Op::TransposeLast2(self.id), self.requires_grad())
    }

    pub fn softmax_last(self) -> Self {
        let x = self.value();
        let cols = *x.shape().last().unwrap();
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        self.graph.push(out, Op::SoftmaxLast(self.id), self.requires_grad())
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        let out = self.value().as_ref().clone().reshape(shape);
        self.graph.push(out, Op::Reshape(self.id), self.requires_grad())
    }
}
