//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive applied during a forward pass as a
//! node holding its value and the handles of its parents. [`Graph::backward`]
//! walks the tape in reverse and returns [`Gradients`] for every leaf.
//!
//! Binary elementwise ops accept operands of identical shape, or one operand
//! whose shape equals the other's shape minus its leading axis (a per-row
//! parameter broadcast over a batch). Every other mismatch is an error.

use std::collections::HashMap;

use super::params::{ParamId, ParameterSet};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    Abs,
    Sqrt,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul { x: Var, w: Var, trans_w: bool },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, end: usize },
    Stack(Vec<Var>),
    SumLast(Var),
    SoftmaxLast(Var),
    ExpandLast { x: Var, width: usize },
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any differentiable leaf reaches this node.
    grad: bool,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar root with respect to every leaf of a [`Graph`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` is an
    /// intermediate node or does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}

fn unary_name(u: Unary) -> &'static str {
    match u {
        Unary::Neg => "neg",
        Unary::Tanh => "tanh",
        Unary::Sigmoid => "sigmoid",
        Unary::Softplus => "softplus",
        Unary::Exp => "exp",
        Unary::Log => "log",
        Unary::Square => "square",
        Unary::Abs => "abs",
        Unary::Sqrt => "sqrt",
    }
}

fn binary_name(b: Binary) -> &'static str {
    match b {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Which operand (if any) is broadcast along the leading axis.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    None,
    Lhs,
    Rhs,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::None)
    } else if !a.is_empty() && &a[1..] == b {
        Ok(Bcast::Rhs)
    } else if !b.is_empty() && &b[1..] == a {
        Ok(Bcast::Lhs)
    } else {
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Sums a full-size gradient over the leading axis down to `small_len`.
fn reduce_leading(full: &[f64], small_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    if small_len == 0 {
        return out;
    }
    for chunk in full.chunks_exact(small_len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += *v;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = match &op {
            Op::Leaf => true,
            Op::Unary(_, x)
            | Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Slice { x, .. }
            | Op::SumLast(x)
            | Op::SoftmaxLast(x)
            | Op::ExpandLast { x, .. }
            | Op::BroadcastRows(x)
            | Op::Sum(x)
            | Op::Mean(x) => self.needs(*x),
            Op::Binary(_, a, b) => self.needs(*a) || self.needs(*b),
            Op::MatMul { x, w, .. } => self.needs(*x) || self.needs(*w),
            Op::Concat(parts) | Op::Stack(parts) => parts.iter().any(|p| self.needs(*p)),
        };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// A leaf node. Gradients are reported for leaves.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that is never differentiated; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Binds a parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(params.value(id).clone());
        self.params.insert(id, v);
        v
    }

    /// The node bound to `id`, if [`Graph::param`] was called for it.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    // ---- elementwise --------------------------------------------------

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out = match kind {
            Unary::Neg => xv.map(|v| -v),
            Unary::Tanh => xv.map(f64::tanh),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Softplus => xv.map(softplus),
            Unary::Exp => xv.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = xv.data().iter().find(|v| **v <= 0.0) {
                    return Err(Error::invalid(format!(
                        "{}: non-positive input {bad}",
                        unary_name(kind)
                    )));
                }
                xv.map(f64::ln)
            }
            Unary::Square => xv.map(|v| v * v),
            Unary::Abs => xv.map(f64::abs),
            Unary::Sqrt => {
                if let Some(bad) = xv.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::invalid(format!(
                        "{}: negative input {bad}",
                        unary_name(kind)
                    )));
                }
                xv.map(f64::sqrt)
            }
        };
        Ok(self.push(out, Op::Unary(kind, x)))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let bc = broadcast_kind(binary_name(kind), av.shape(), bv.shape())?;
        let (big, shape) = match bc {
            Bcast::Lhs => (bv.len(), bv.shape().to_vec()),
            _ => (av.len(), av.shape().to_vec()),
        };
        let (ad, bd) = (av.data(), bv.data());
        let (al, bl) = (ad.len().max(1), bd.len().max(1));
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data: Vec<f64> = match bc {
            Bcast::None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Rhs => (0..big).map(|i| f(ad[i], bd[i % bl])).collect(),
            Bcast::Lhs => (0..big).map(|i| f(ad[i % al], bd[i])).collect(),
        };
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `c · x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v * c);
        Ok(self.push(out, Op::Scale(x, c)))
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v + c);
        Ok(self.push(out, Op::Shift(x)))
    }

    // ---- linear algebra -----------------------------------------------

    fn matmul_impl(&mut self, x: Var, w: Var, trans_w: bool) -> Result<Var> {
        let op = if trans_w { "matmul_t" } else { "matmul" };
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mismatch = || Error::Shape {
            op,
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        };
        if wv.rank() != 2 || !(xv.rank() == 1 || xv.rank() == 2) {
            return Err(mismatch());
        }
        let (w0, w1) = (wv.shape()[0], wv.shape()[1]);
        let (k, n) = if trans_w { (w1, w0) } else { (w0, w1) };
        if xv.last_dim() != k {
            return Err(mismatch());
        }
        let m = xv.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, xv.data(), false, wv.data(), trans_w, &mut out, false);
        let shape = if xv.rank() == 1 { vec![n] } else { vec![m, n] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { x, w, trans_w }))
    }

    /// `x · w` with `x: [rows, k]` (or `[k]`) and `w: [k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_impl(x, w, false)
    }

    /// `x · wᵀ` with `w: [n, k]`, i.e. the affine-layer convention `W x`
    /// applied to every row of `x`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_impl(x, w, true)
    }

    /// `x · wᵀ + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        self.add(y, b)
    }

    // ---- structural ---------------------------------------------------

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let lead: Vec<usize> = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let w = xv.last_dim();
        if xv.rank() == 0 || start >= end || end > w {
            return Err(Error::Shape {
                op: "slice",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, start, end }))
    }

    /// Stacks equally shaped inputs along a new last axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack: no inputs"))?;
        let shape0 = self.shape(*first).to_vec();
        for &p in parts {
            if self.shape(p) != shape0.as_slice() {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: shape0,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let d = parts.len();
        let n = self.value(*first).len();
        let mut data = vec![0.0; n * d];
        for (i, &p) in parts.iter().enumerate() {
            for (r, v) in self.nodes[p.0].value.data().iter().enumerate() {
                data[r * d + i] = *v;
            }
        }
        let mut shape = shape0;
        shape.push(d);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Stack(parts.to_vec())))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() == 0 {
            return Err(Error::Shape {
                op: "sum_last",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let w = xv.last_dim();
        let data: Vec<f64> = if w == 0 {
            vec![0.0; xv.shape()[..xv.rank() - 1].iter().product()]
        } else {
            xv.data().chunks_exact(w).map(|c| c.iter().sum()).collect()
        };
        let shape = xv.shape()[..xv.rank() - 1].to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumLast(x)))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() == 0 || xv.last_dim() == 0 {
            return Err(Error::Shape {
                op: "softmax",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let w = xv.last_dim();
        let mut data = Vec::with_capacity(xv.len());
        for c in xv.data().chunks_exact(w) {
            let mx = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut z = 0.0;
            for &v in c {
                let e = (v - mx).exp();
                z += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= z;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::SoftmaxLast(x)))
    }

    /// Repeats every element `width` times along a new last axis.
    pub fn expand_last(&mut self, x: Var, width: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(xv.len() * width);
        for &v in xv.data() {
            data.extend(std::iter::repeat_n(v, width));
        }
        let mut shape = xv.shape().to_vec();
        shape.push(width);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ExpandLast { x, width }))
    }

    /// Explicit leading-axis broadcast: `[..]` to `[rows, ..]`.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(xv.len() * rows);
        for _ in 0..rows {
            data.extend_from_slice(xv.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(xv.shape());
        Ok(self.push(Tensor::from_parts(shape, data), Op::BroadcastRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s = xv.sum() / xv.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x)))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Backward sweep that adds parameter gradients into `params`.
    pub fn backward_into(&self, root: Var, params: &mut ParameterSet) -> Result<Gradients> {
        let grads = self.backward(root)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                params.accumulate_grad(id, g);
            }
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let gd = g.data();
                let d: Vec<f64> = match kind {
                    Unary::Neg => gd.iter().map(|v| -v).collect(),
                    Unary::Tanh => zip_map(gd, y.data(), |g, y| g * (1.0 - y * y)),
                    Unary::Sigmoid => zip_map(gd, y.data(), |g, y| g * y * (1.0 - y)),
                    Unary::Softplus => zip_map(gd, xv.data(), |g, x| g * sigmoid(x)),
                    Unary::Exp => zip_map(gd, y.data(), |g, y| g * y),
                    Unary::Log => zip_map(gd, xv.data(), |g, x| g / x),
                    Unary::Square => zip_map(gd, xv.data(), |g, x| 2.0 * g * x),
                    Unary::Abs => zip_map(gd, xv.data(), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                    Unary::Sqrt => zip_map(gd, y.data(), |g, y| {
                        if y > 0.0 {
                            0.5 * g / y
                        } else {
                            0.0
                        }
                    }),
                };
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Binary(kind, a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let bc = broadcast_kind("", av.shape(), bv.shape()).unwrap();
                let n = y.len();
                let (al, bl) = (av.len().max(1), bv.len().max(1));
                let ai = |i: usize| if bc == Bcast::Lhs { av.data()[i % al] } else { av.data()[i] };
                let bi = |i: usize| if bc == Bcast::Rhs { bv.data()[i % bl] } else { bv.data()[i] };
                let gd = g.data();
                if self.needs(*a) {
                    let ga: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => (0..n).map(|i| gd[i] * bi(i)).collect(),
                        Binary::Div => (0..n).map(|i| gd[i] / bi(i)).collect(),
                    };
                    let ga = if bc == Bcast::Lhs { reduce_leading(&ga, av.len()) } else { ga };
                    accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                }
                if self.needs(*b) {
                    let gb: Vec<f64> = match kind {
                        Binary::Add => gd.to_vec(),
                        Binary::Sub => gd.iter().map(|v| -v).collect(),
                        Binary::Mul => (0..n).map(|i| gd[i] * ai(i)).collect(),
                        Binary::Div => (0..n)
                            .map(|i| {
                                let q = bi(i);
                                -gd[i] * ai(i) / (q * q)
                            })
                            .collect(),
                    };
                    let gb = if bc == Bcast::Rhs { reduce_leading(&gb, bv.len()) } else { gb };
                    accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Shift(x) => {
                accumulate(grads, *x, g.clone());
            }
            Op::MatMul { x, w, trans_w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (w0, w1) = (wv.shape()[0], wv.shape()[1]);
                let (k, n) = if *trans_w { (w1, w0) } else { (w0, w1) };
                let m = xv.rows();
                if self.needs(*x) {
                    // dx = g · wᵀ (or g · w when the forward used wᵀ)
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, wv.data(), !*trans_w, &mut dx, false);
                    accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if self.needs(*w) {
                    // dw = xᵀ · g, or gᵀ · x for the transposed layout
                    let mut dw = vec![0.0; w0 * w1];
                    if *trans_w {
                        gemm(n, m, k, g.data(), true, xv.data(), false, &mut dw, false);
                    } else {
                        gemm(k, m, n, xv.data(), true, g.data(), false, &mut dw, false);
                    }
                    accumulate(grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
            }
            Op::Concat(parts) => {
                let width = y.last_dim();
                let rows = y.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let pw = pv.last_dim();
                    if !self.needs(p) {
                        offset += pw;
                        continue;
                    }
                    let mut d = Vec::with_capacity(pv.len());
                    for r in 0..rows {
                        let row = &g.data()[r * width..(r + 1) * width];
                        d.extend_from_slice(&row[offset..offset + pw]);
                    }
                    accumulate(grads, p, Tensor::from_parts(pv.shape().to_vec(), d));
                    offset += pw;
                }
            }
            Op::Slice { x, start, end } => {
                let xv = self.value(*x);
                let w = xv.last_dim();
                let sw = end - start;
                let mut d = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    d[r * w + start..r * w + end].copy_from_slice(&g.data()[r * sw..(r + 1) * sw]);
                }
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Stack(parts) => {
                let dn = parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    if !self.needs(p) {
                        continue;
                    }
                    let pv = self.value(p);
                    let d: Vec<f64> = (0..pv.len()).map(|r| g.data()[r * dn + i]).collect();
                    accumulate(grads, p, Tensor::from_parts(pv.shape().to_vec(), d));
                }
            }
            Op::SumLast(x) => {
                let xv = self.value(*x);
                let w = xv.last_dim();
                let mut d = Vec::with_capacity(xv.len());
                for &v in g.data() {
                    d.extend(std::iter::repeat_n(v, w));
                }
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::SoftmaxLast(x) => {
                let w = y.last_dim();
                let mut d = Vec::with_capacity(y.len());
                for (yc, gc) in y.data().chunks_exact(w).zip(g.data().chunks_exact(w)) {
                    let dot: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                    d.extend(yc.iter().zip(gc).map(|(y, g)| y * (g - dot)));
                }
                accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::ExpandLast { x, width } => {
                let xv = self.value(*x);
                let d: Vec<f64> = g.data().chunks_exact(*width).map(|c| c.iter().sum()).collect();
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::BroadcastRows(x) => {
                let xv = self.value(*x);
                let d = reduce_leading(g.data(), xv.len());
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::filled(xv.shape(), g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let c = g.item() / xv.len() as f64;
                accumulate(grads, *x, Tensor::filled(xv.shape(), c));
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softplus_of_zero_is_ln2() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.softplus(x).unwrap();
        assert!(close(g.value(y).item(), std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax_last(x).unwrap();
        for &v in g.value(y).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn tanh_saturates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(20.0));
        let y = g.tanh(x).unwrap();
        assert!(close(g.value(y).item(), 20f64.tanh(), 0.0));
        assert!(close(g.value(y).item(), 1.0, 1e-12));
    }

    #[test]
    fn linear_map_gradient_is_input() {
        // root = sum(W·x), x fixed: d root / d W[i,j] = x[j]
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.matmul_t(x, w).unwrap();
        let root = g.sum(y).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn independent_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let p = g.leaf(Tensor::vector(vec![1.0, 1.0]));
        let root = g.square(a).unwrap();
        let grads = g.backward(root).unwrap();
        assert!(grads.get(p).is_none());
        assert_eq!(grads.get_or_zeros(&g, p).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(a).unwrap().item(), 4.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
        let w = g.leaf(Tensor::zeros(&[4, 4]));
        let err = g.matmul(a, w).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn leading_axis_broadcast_reduces_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.leaf(Tensor::vector(vec![10.0, 20.0]));
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[10., 40., 30., 80., 50., 120.]);
        let root = g.sum(y).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[9.0, 12.0]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 0.0]));
        assert!(g.log(x).is_err());
    }
}
