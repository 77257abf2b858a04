//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every step. Each primitive appends one node
//! holding its forward value, so append order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;
use std::ops::Range;

use super::kernels::{col2im, gemm, im2col, rm, tr, ConvGeom};
use super::tensor::{check_same_shape, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything owning a fixed, ordered list of parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Primitive selector for [`Graph::apply_primitive`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Sum,
    Mean,
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    Slice(Vec<Range<usize>>),
    Concat { axis: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Broadcast(Var),
    Reshape(Var),
    Slice(Var, Vec<Range<usize>>),
    Concat(Vec<Var>, usize),
    Permute(Var, Vec<usize>),
    MatmulChannels(Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    LogSoftmax(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatmulChannels(w, x) => vec![*w, *x],
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::Broadcast(a)
            | Op::Reshape(a)
            | Op::Slice(a, _)
            | Op::Permute(a, _)
            | Op::LogSoftmax(a) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
            Op::Conv2d {
                x, kernel, bias, ..
            } => vec![*x, *kernel, *bias],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of primitive applications.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input treated as data; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a trainable parameter; its gradient is collected by name.
    pub fn param(&mut self, p: &Param) -> Var {
        let v = self.leaf(p.value.clone());
        self.params.push((p.name.clone(), v));
        v
    }

    /// Binds a parameter as a constant (frozen model).
    pub fn frozen(&mut self, p: &Param) -> Var {
        self.constant(p.value.clone())
    }

    pub fn bind(&mut self, p: &Param, trainable: bool) -> Var {
        if trainable {
            self.param(p)
        } else {
            self.frozen(p)
        }
    }

    /// Generic entry point over the enumerated primitive set.
    pub fn apply_primitive(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match &op {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => 2,
            Primitive::Concat { .. } => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::invalid(format!(
                "{op:?} takes {arity} input(s), got {}",
                inputs.len()
            )));
        }
        match op {
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::Div => self.div(inputs[0], inputs[1]),
            Primitive::Neg => Ok(self.neg(inputs[0])),
            Primitive::Exp => Ok(self.exp(inputs[0])),
            Primitive::Log => self.log(inputs[0]),
            Primitive::Tanh => Ok(self.tanh(inputs[0])),
            Primitive::Sum => Ok(self.sum(inputs[0])),
            Primitive::Mean => Ok(self.mean(inputs[0])),
            Primitive::Broadcast(shape) => self.broadcast(inputs[0], &shape),
            Primitive::Reshape(shape) => self.reshape(inputs[0], &shape),
            Primitive::Slice(ranges) => self.slice(inputs[0], &ranges),
            Primitive::Concat { axis } => self.concat(inputs, axis),
        }
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same_shape(name, ta, tb)?;
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("div", self.value(a), self.value(b))?;
        if let Some(index) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        let out = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(index) = t.data().iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                index,
                value: t.data()[index],
            });
        }
        let out = t.map(f64::ln);
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Addition of a constant.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(Error::invalid("sum_last on a scalar"));
        }
        let c = t.last_dim();
        let data: Vec<f64> = t
            .data()
            .chunks(c)
            .map(|row| row.iter().fold(0.0, |s, &v| s + v))
            .collect();
        let mut shape = t.shape()[..t.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SumLast(a)))
    }

    /// Expands `a` to `shape`, aligning trailing axes; size-1 or missing
    /// leading axes are repeated.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let map = broadcast_map(src.shape(), shape)?;
        let data = map.iter().map(|&i| src.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Broadcast(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Sub-block selected by one half-open range per axis.
    pub fn slice(&mut self, a: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let src = self.value(a);
        let idx = slice_indices(src.shape(), ranges)?;
        let shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        let data = idx.iter().map(|&i| src.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice(a, ranges.to_vec())))
    }

    /// Slice along one axis, keeping every other axis whole.
    pub fn slice_axis(&mut self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("axis {axis} out of range")));
        }
        let ranges: Vec<Range<usize>> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if i == axis { range.clone() } else { 0..d })
            .collect();
        self.slice(a, &ranges)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::invalid(format!(
                    "concat: shape {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let (shape, idx) = permute_indices(src.shape(), axes)?;
        let data = idx.iter().map(|&i| src.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Permute(a, axes.to_vec())))
    }

    /// Multiplies every channel vector (last axis) of `x` by the square
    /// matrix `w`: `out[p] = w · x[p]`.
    pub fn matmul_channels(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        let c = tx.last_dim();
        if tw.shape() != [c, c] || tx.rank() == 0 {
            return Err(Error::invalid(format!(
                "matmul_channels: weight {:?} does not match channels of {:?}",
                tw.shape(),
                tx.shape()
            )));
        }
        let rows = tx.len() / c;
        let mut out = vec![0.0; tx.len()];
        gemm(rows, c, c, tx.data(), rm(c), tw.data(), tr(c), 0.0, &mut out);
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::MatmulChannels(w, x)))
    }

    /// 3×3 cross-correlation with zero padding 1 over `x` of shape H×W×Cin
    /// or N×H×W×Cin; `kernel` is 3×3×Cin×Cout and `bias` has Cout entries.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let (n, h, w, cin) = match *tx.shape() {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => {
                return Err(Error::invalid(format!(
                    "conv2d input must be HxWxC or NxHxWxC, got {:?}",
                    tx.shape()
                )))
            }
        };
        let ks = tk.shape();
        if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 || ks[2] != cin {
            return Err(Error::invalid(format!(
                "conv2d kernel {ks:?} does not match {cin} input channels"
            )));
        }
        let cout = ks[3];
        if tb.shape() != [cout] {
            return Err(Error::invalid(format!(
                "conv2d bias {:?} does not match {cout} output channels",
                tb.shape()
            )));
        }
        let geom = ConvGeom {
            n,
            h,
            w,
            cin,
            cout,
        };
        let cols = im2col(tx.data(), geom);
        let mut out = Vec::with_capacity(geom.rows() * cout);
        for _ in 0..geom.rows() {
            out.extend_from_slice(tb.data());
        }
        gemm(
            geom.rows(),
            geom.patch(),
            cout,
            &cols,
            rm(geom.patch()),
            tk.data(),
            rm(cout),
            1.0,
            &mut out,
        );
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Log-probabilities over the last axis, computed with max subtraction.
    pub fn log_softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        let c = t.last_dim();
        if t.rank() == 0 || c < 2 {
            return Err(Error::invalid(format!(
                "log_softmax needs at least 2 channels, got shape {:?}",
                t.shape()
            )));
        }
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().fold(0.0, |s, &v| s + (v - m).exp()).ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LogSoftmax(logits)))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.clone())?;
                }
                if wants(*b) {
                    send(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    send(*a, g.clone())?;
                }
                if wants(*b) {
                    send(*b, g.map(|x| -x))?;
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y)?)?;
                }
                if wants(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y)?)?;
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x / y)?)?;
                }
                if wants(*b) {
                    // d(a/b)/db = -out / b
                    let t = node.value.zip_map(val(*b), |o, y| -o / y)?;
                    send(*b, t.zip_map(g, |x, y| x * y)?)?;
                }
            }
            Op::Neg(a) => send(*a, g.map(|x| -x))?,
            Op::Exp(a) => send(*a, g.zip_map(&node.value, |x, o| x * o)?)?,
            Op::Log(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)?)?,
            Op::Tanh(a) => send(*a, g.zip_map(&node.value, |x, o| x * (1.0 - o * o))?)?,
            Op::Scale(a, c) => send(*a, g.map(|x| x * c))?,
            Op::AddScalar(a) => send(*a, g.clone())?,
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item()))?,
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                send(*a, Tensor::full(val(*a).shape(), g.item() / n))?;
            }
            Op::SumLast(a) => {
                let src = val(*a);
                let c = src.last_dim();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, c))
                    .collect();
                send(*a, Tensor::new(src.shape().to_vec(), data)?)?;
            }
            Op::Broadcast(a) => {
                let src = val(*a);
                let map = broadcast_map(src.shape(), g.shape())?;
                let mut acc = vec![0.0; src.len()];
                for (&i, &v) in map.iter().zip(g.data()) {
                    acc[i] += v;
                }
                send(*a, Tensor::new(src.shape().to_vec(), acc)?)?;
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?)?,
            Op::Slice(a, ranges) => {
                let src = val(*a);
                let idx = slice_indices(src.shape(), ranges)?;
                let mut acc = vec![0.0; src.len()];
                for (&i, &v) in idx.iter().zip(g.data()) {
                    acc[i] += v;
                }
                send(*a, Tensor::new(src.shape().to_vec(), acc)?)?;
            }
            Op::Concat(parts, axis) => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let s = val(p).shape();
                    let block = s[*axis] * inner;
                    if wants(p) {
                        let mut data = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * row + offset;
                            data.extend_from_slice(&g.data()[start..start + block]);
                        }
                        send(p, Tensor::new(s.to_vec(), data)?)?;
                    }
                    offset += block;
                }
            }
            Op::Permute(a, axes) => {
                let src = val(*a);
                let (_, idx) = permute_indices(src.shape(), axes)?;
                let mut acc = vec![0.0; src.len()];
                for (&i, &v) in idx.iter().zip(g.data()) {
                    acc[i] = v;
                }
                send(*a, Tensor::new(src.shape().to_vec(), acc)?)?;
            }
            Op::MatmulChannels(w, x) => {
                let (tw, tx) = (val(*w), val(*x));
                let c = tx.last_dim();
                let rows = tx.len() / c;
                if wants(*x) {
                    let mut dx = vec![0.0; tx.len()];
                    gemm(rows, c, c, g.data(), rm(c), tw.data(), rm(c), 0.0, &mut dx);
                    send(*x, Tensor::new(tx.shape().to_vec(), dx)?)?;
                }
                if wants(*w) {
                    let mut dw = vec![0.0; c * c];
                    gemm(c, rows, c, g.data(), tr(c), tx.data(), rm(c), 0.0, &mut dw);
                    send(*w, Tensor::new(vec![c, c], dw)?)?;
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
                if wants(*kernel) {
                    let mut dk = vec![0.0; patch * cout];
                    gemm(patch, rows, cout, cols, tr(patch), g.data(), rm(cout), 0.0, &mut dk);
                    send(*kernel, Tensor::new(val(*kernel).shape().to_vec(), dk)?)?;
                }
                if wants(*bias) {
                    let mut db = vec![0.0; cout];
                    for row in g.data().chunks(cout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*bias, Tensor::new(vec![cout], db)?)?;
                }
                if wants(*x) {
                    let tk = val(*kernel);
                    let mut dcols = vec![0.0; rows * patch];
                    gemm(rows, cout, patch, g.data(), rm(cout), tk.data(), tr(cout), 0.0, &mut dcols);
                    let dx = col2im(&dcols, *geom);
                    send(*x, Tensor::new(val(*x).shape().to_vec(), dx)?)?;
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.last_dim();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, orow) in g.data().chunks(c).zip(node.value.data().chunks(c)) {
                    let total = grow.iter().fold(0.0, |s, &v| s + v);
                    dx.extend(grow.iter().zip(orow).map(|(&gv, &o)| gv - o.exp() * total));
                }
                send(*a, Tensor::new(node.value.shape().to_vec(), dx)?)?;
            }
        }
        Ok(())
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds each bound parameter's gradient into the matching `Param.grad`
    /// (matched by name). Returns how many parameters received a gradient.
    pub fn accumulate<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<usize> {
        let mut params: Vec<&mut Param> = params.into_iter().collect();
        let by_name: HashMap<String, usize> = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let mut touched = 0;
        for (name, var) in &self.params {
            let (Some(&i), Some(g)) = (by_name.get(name), self.get(*var)) else {
                continue;
            };
            params[i].grad.add_assign(g)?;
            touched += 1;
        }
        Ok(touched)
    }
}

/// For each flat output index of `to`, the flat source index in `from`.
fn broadcast_map(from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    if from.len() > to.len() {
        return Err(Error::invalid(format!("cannot broadcast {from:?} to {to:?}")));
    }
    let lead = to.len() - from.len();
    for (i, &d) in from.iter().enumerate() {
        if d != 1 && d != to[lead + i] {
            return Err(Error::invalid(format!("cannot broadcast {from:?} to {to:?}")));
        }
    }
    let src_strides = strides(from);
    let n: usize = to.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; to.len()];
    for _ in 0..n {
        let mut off = 0;
        for (i, &d) in from.iter().enumerate() {
            if d != 1 {
                off += counter[lead + i] * src_strides[i];
            }
        }
        map.push(off);
        odometer(&mut counter, to);
    }
    Ok(map)
}

fn slice_indices(shape: &[usize], ranges: &[Range<usize>]) -> Result<Vec<usize>> {
    if ranges.len() != shape.len()
        || ranges
            .iter()
            .zip(shape)
            .any(|(r, &d)| r.start >= r.end || r.end > d)
    {
        return Err(Error::invalid(format!(
            "slice {ranges:?} invalid for shape {shape:?}"
        )));
    }
    let st = strides(shape);
    let out_shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
    let n: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; shape.len()];
    for _ in 0..n {
        let off: usize = counter
            .iter()
            .zip(ranges)
            .zip(&st)
            .map(|((c, r), s)| (r.start + c) * s)
            .sum();
        idx.push(off);
        odometer(&mut counter, &out_shape);
    }
    Ok(idx)
}

fn permute_indices(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len()
        || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::invalid(format!(
            "axes {axes:?} are not a permutation for shape {shape:?}"
        )));
    }
    let st = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; shape.len()];
    for _ in 0..n {
        let off: usize = counter.iter().zip(axes).map(|(c, &a)| c * st[a]).sum();
        idx.push(off);
        odometer(&mut counter, &out_shape);
    }
    Ok((out_shape, idx))
}

fn odometer(counter: &mut [usize], shape: &[usize]) {
    for i in (0..shape.len()).rev() {
        counter[i] += 1;
        if counter[i] < shape[i] {
            return;
        }
        counter[i] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn exp_and_sum_basics() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[0.0]));
        let e = g.exp(x);
        assert_eq!(g.value(e).data(), &[1.0]);
        let y = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(y);
        assert_eq!(g.value(s).item(), 6.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let p = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(p, p).unwrap();
        let root = g.sum(sq);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::full(&[2, 3, 2], 0.7));
        let root = g.sum(p);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(p).unwrap(), &Tensor::ones(&[2, 3, 2]));
    }

    #[test]
    fn two_consumers_sum_contributions() {
        // f(x) = exp(x) * tanh(x); f' = exp(x) tanh(x) + exp(x)(1 - tanh²x)
        let x0: f64 = 0.3;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(x0));
        let a = g.exp(x);
        let b = g.tanh(x);
        let f = g.mul(a, b).unwrap();
        let grads = g.backward(f).unwrap();
        let want = x0.exp() * x0.tanh() + x0.exp() * (1.0 - x0.tanh().powi(2));
        assert!((grads.get(x).unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn log_domain_error_reports_index() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 0.0, -1.0]));
        match g.log(x) {
            Err(Error::Domain { op, index, .. }) => {
                assert_eq!(op, "log");
                assert_eq!(index, 1);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn div_by_zero_and_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let z = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.div(a, z), Err(Error::Domain { index: 1, .. })));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn matmul_channels_examples() {
        let mut g = Graph::new();
        let w = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = g.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let y = g.matmul_channels(w, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);

        let id = g.constant(Tensor::identity(3));
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.25).collect();
        let x = g.constant(t(&[2, 2, 3], &data));
        let y = g.matmul_channels(id, x).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let bad = g.constant(Tensor::identity(2));
        assert!(g.matmul_channels(bad, x).is_err());
    }

    #[test]
    fn conv2d_trivial_kernels() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 - 4.0).collect();
        let x = g.constant(t(&[3, 4, 1], &data));
        let mut delta = Tensor::zeros(&[3, 3, 1, 1]);
        delta.data_mut()[4] = 1.0;
        let k = g.constant(delta);
        let b0 = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let zk = g.constant(Tensor::zeros(&[3, 3, 1, 1]));
        let b = g.constant(t(&[1], &[2.5]));
        let y = g.conv2d(x, zk, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));

        let wrong = g.constant(Tensor::zeros(&[3, 3, 2, 1]));
        assert!(g.conv2d(x, wrong, b).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 2, 4], 0.37));
        let y = g.log_softmax_channels(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - (0.25f64).ln()).abs() < 1e-15);
        }
        let x = g.constant(t(&[1, 1, 2], &[0.0, 3f64.ln()]));
        let y = g.log_softmax_channels(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25f64.ln()).abs() < 1e-15);
        assert!((d[1] - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn permute_and_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let a = g.slice_axis(x, 1, 0..1).unwrap();
        let b = g.slice_axis(x, 1, 1..3).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), g.value(x));
    }

    #[test]
    fn broadcast_trailing_alignment() {
        let mut g = Graph::new();
        let v = g.leaf(t(&[2], &[1.0, 2.0]));
        let b = g.broadcast(v, &[3, 2]).unwrap();
        assert_eq!(g.value(b).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let s = g.sum(b);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[3.0, 3.0]);
        assert!(g.broadcast(v, &[3]).is_err());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let p = Param::new("w", t(&[2], &[1.0, -1.0]));
        let mut g = Graph::new();
        let w = g.frozen(&p);
        let x = g.leaf(t(&[2], &[0.5, 0.5]));
        let m = g.mul(w, x).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, -1.0]);
    }

    #[test]
    fn repeated_accumulation_adds() {
        let mut p = Param::new("w", t(&[2], &[1.0, 3.0]));
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&p);
            let sq = g.mul(w, w).unwrap();
            let s = g.sum(sq);
            let grads = g.backward(s).unwrap();
            assert_eq!(grads.accumulate([&mut p]).unwrap(), 1);
        }
        assert_eq!(p.grad.data(), &[4.0, 12.0]);
    }
}
