//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value; node indices are
//! therefore a topological order and `backward` is a single reverse sweep.

use super::conv::{self, Conv2dGeom};
use super::linalg::{gemm, log_sum_exp};
use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose backward rule lives outside the graph (e.g. fused losses).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input, given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>>;
}

/// Index maps from an output element to the contributing input elements.
#[derive(Debug)]
struct Broadcast {
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Relu(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    ReduceSum(Var, usize),
    ReduceMean(Var, usize),
    ReduceMax(Var, usize, Vec<usize>),
    ReduceStd(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm(Var, f64),
    Embedding(Var, Vec<usize>),
    Select(Var, Vec<usize>),
    Conv2d(Var, Var, Option<Var>, Conv2dGeom),
    DepthwiseConv1d(Var, Var),
    GradReverse(Var, f64),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reachable and
    /// requires a gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but materializes zeros for unreachable nodes.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_index(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src == out {
        return None;
    }
    let n = out.len();
    let offset = n - src.len();
    // Strides of the source laid over the output dims; 0 on broadcast dims.
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = s;
        }
        s *= src[i];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for d in (0..n).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    Some(idx)
}

fn reduce_into(grad: &mut [f64], g: &[f64], idx: &Option<Vec<usize>>, scale: impl Fn(usize) -> f64) {
    match idx {
        None => grad.iter_mut().zip(g).enumerate().for_each(|(i, (a, b))| *a += b * scale(i)),
        Some(map) => {
            for (o, &i) in map.iter().enumerate() {
                grad[i] += g[o] * scale(o);
            }
        }
    }
}

fn at(idx: &Option<Vec<usize>>, o: usize) -> usize {
    idx.as_ref().map_or(o, |m| m[o])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Inserts a leaf; it participates in differentiation iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad;
        let mut v = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        v.requires_grad = rg;
        self.push(v, Op::Leaf, rg)
    }

    /// Inserts a constant (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    /// Inserts a differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf, true)
    }

    fn make(&mut self, shape: &[usize], data: Vec<f64>, op: Op, rg: bool) -> Var {
        let t = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(t, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::Shape {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let bc = Broadcast {
            a: broadcast_index(&sa, &out),
            b: broadcast_index(&sb, &out),
        };
        let n: usize = out.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let data = (0..n).map(|o| f(da[at(&bc.a, o)], db[at(&bc.b, o)])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.make(&out, data, mk(a, b, bc), rg))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.make(&shape, data, op, rg)
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::ScalarMul(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scalar_mul(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `m×k · k×n` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut c, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.make(&[m, n], c, Op::Matmul(a, b), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.data(x)[o * len..(o + 1) * len]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.make(&out_shape, data, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let rg = self.rg(x);
        Ok(self.make(&out_shape, data, Op::Slice(x, axis, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.make(shape, data, Op::Reshape(x), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose needs 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.make(&[c, r], data, Op::Transpose(x), rg))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.make(&[1], vec![s], Op::SumAll(x), rg)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scalar_mul(s, 1.0 / n)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = shape.to_vec();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    fn reduce(&mut self, x: Var, axis: usize, f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut it = (0..n).map(|k| src[(o * n + k) * inner + i]);
                out.push(f(&mut it));
            }
        }
        Ok((Self::reduced_shape(&shape, axis), out))
    }

    /// Sum along `axis`; the axis is removed.
    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (s, d) = self.reduce(x, axis, |it: &mut dyn Iterator<Item = f64>| it.sum())?;
        let rg = self.rg(x);
        Ok(self.make(&s, d, Op::ReduceSum(x, axis), rg))
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let n = self.shape(x)[axis] as f64;
        let (s, d) = self.reduce(x, axis, |it: &mut dyn Iterator<Item = f64>| it.sum::<f64>() / n)?;
        let rg = self.rg(x);
        Ok(self.make(&s, d, Op::ReduceMean(x, axis), rg))
    }

    /// Maximum along `axis`; ties route the gradient to the first maximum.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (0, f64::NEG_INFINITY);
                for k in 0..n {
                    let v = src[(o * n + k) * inner + i];
                    if v > best.1 {
                        best = (k, v);
                    }
                }
                out.push(best.1);
                arg.push(best.0);
            }
        }
        let rg = self.rg(x);
        Ok(self.make(&Self::reduced_shape(&shape, axis), out, Op::ReduceMax(x, axis, arg), rg))
    }

    /// Population standard deviation along `axis` with `eps` added to the
    /// variance inside the square root.
    pub fn reduce_std(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis(x, axis)?;
        let n = self.shape(x)[axis] as f64;
        let (s, d) = self.reduce(x, axis, |it: &mut dyn Iterator<Item = f64>| {
            let vals: Vec<f64> = it.collect();
            let mean = vals.iter().sum::<f64>() / n;
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n + eps).sqrt()
        })?;
        let rg = self.rg(x);
        Ok(self.make(&s, d, Op::ReduceStd(x, axis), rg))
    }

    fn softmax_impl(&self, x: Var, axis: usize, log: bool) -> Vec<f64> {
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..n {
                    buf[k] = src[(o * n + k) * inner + i];
                }
                let lse = log_sum_exp(&buf);
                for k in 0..n {
                    let l = buf[k] - lse;
                    out[(o * n + k) * inner + i] = if log { l } else { l.exp() };
                }
            }
        }
        out
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let d = self.softmax_impl(x, axis, false);
        let s = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.make(&s, d, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let d = self.softmax_impl(x, axis, true);
        let s = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.make(&s, d, Op::LogSoftmax(x, axis), rg))
    }

    /// Normalizes over the last axis to zero mean and unit variance (no
    /// affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensors have rank >= 1");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        let rg = self.rg(x);
        self.make(&shape, out, Op::LayerNorm(x, eps), rg)
    }

    /// Rows of a 2-D `table` gathered by `indices`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("embedding table must be 2-D, got {s:?}")));
        }
        if indices.is_empty() {
            return Err(Error::invalid("embedding lookup of no rows"));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("embedding index {bad} >= {rows}")));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.make(&[indices.len(), d], data, Op::Embedding(table, indices.to_vec()), rg))
    }

    /// Gathers elements by flat (row-major) index into a 1-D tensor.
    pub fn select(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if flat.is_empty() || flat.iter().any(|&i| i >= n) {
            return Err(Error::invalid(format!("select indices out of range for {n} elements")));
        }
        let src = self.data(x);
        let data = flat.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        Ok(self.make(&[flat.len()], data, Op::Select(x, flat.to_vec()), rg))
    }

    /// 2-D cross-correlation of an `N×C_in×H×W` input with an
    /// `C_out×C_in×kh×kw` weight.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let (oh, ow) = match (
            Conv2dGeom::out_len(sx[2], sw[2], stride, pad),
            Conv2dGeom::out_len(sx[3], sw[3], stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::invalid(format!(
                    "conv2d: nonpositive output size for input {sx:?}, kernel {sw:?}, stride {stride}, pad {pad}"
                )))
            }
        };
        let geom = Conv2dGeom {
            n: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh,
            ow,
        };
        let out = conv::conv2d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.make(&[geom.n, geom.c_out, oh, ow], out, Op::Conv2d(x, w, b, geom), rg))
    }

    /// Depthwise same-length temporal convolution of a `T×d` input with a
    /// `d×k` kernel, `k` odd.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::Shape {
                op: "depthwise_conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sw[1] % 2 == 0 {
            return Err(Error::invalid(format!("depthwise_conv1d kernel must be odd, got {}", sw[1])));
        }
        let y = conv::dwconv1d_forward(self.data(x), sx[0], sx[1], self.data(w), sw[1]);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.make(&sx, y, Op::DepthwiseConv1d(x, w), rg))
    }

    /// Identity forward; scales the upstream gradient by `-lambda`.
    pub fn gradient_reversal(&mut self, x: Var, lambda: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        self.make(&shape, data, Op::GradReverse(x, lambda), rg)
    }

    /// Records a node computed outside the graph with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&x| self.rg(x));
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.backprop_node(i, g, lo);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, lo: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(lo[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                if let Some(ga) = self.slot(lo, *a) {
                    reduce_into(ga, g, &bc.a, |_| 1.0);
                }
                if let Some(gb) = self.slot(lo, *b) {
                    reduce_into(gb, g, &bc.b, |_| 1.0);
                }
            }
            Op::Sub(a, b, bc) => {
                if let Some(ga) = self.slot(lo, *a) {
                    reduce_into(ga, g, &bc.a, |_| 1.0);
                }
                if let Some(gb) = self.slot(lo, *b) {
                    reduce_into(gb, g, &bc.b, |_| -1.0);
                }
            }
            Op::Mul(a, b, bc) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(lo, *a) {
                    reduce_into(ga, g, &bc.a, |o| db[at(&bc.b, o)]);
                }
                if let Some(gb) = self.slot(lo, *b) {
                    reduce_into(gb, g, &bc.b, |o| da[at(&bc.a, o)]);
                }
            }
            Op::Div(a, b, bc) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(lo, *a) {
                    reduce_into(ga, g, &bc.a, |o| 1.0 / db[at(&bc.b, o)]);
                }
                if let Some(gb) = self.slot(lo, *b) {
                    reduce_into(gb, g, &bc.b, |o| {
                        let bv = db[at(&bc.b, o)];
                        -da[at(&bc.a, o)] / (bv * bv)
                    });
                }
            }
            Op::ScalarMul(x, c) => {
                if let Some(gx) = self.slot(lo, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(lo, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::GradReverse(x, lambda) => {
                if let Some(gx) = self.slot(lo, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a -= lambda * b);
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.slot(lo, *x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k];
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.data(*x);
                if let Some(gx) = self.slot(lo, *x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] / xv[k];
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(gx) = self.slot(lo, *x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * 0.5 / y[k];
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(lo, *x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                if let Some(gx) = self.slot(lo, *x) {
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(lo, *a) {
                    gemm(m, n, k, g, false, db, true, ga, 1.0);
                }
                if let Some(gb) = self.slot(lo, *b) {
                    gemm(k, m, n, da, true, g, false, gb, 1.0);
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if let Some(gx) = self.slot(lo, x) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gx[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice(x, axis, start) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.slot(lo, *x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = self.slot(lo, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(lo, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::ReduceSum(x, axis) | Op::ReduceMean(x, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let scale = if matches!(node.op, Op::ReduceMean(..)) { 1.0 / n as f64 } else { 1.0 };
                if let Some(gx) = self.slot(lo, *x) {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                gx[(o * n + k) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::ReduceMax(x, axis, arg) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                if let Some(gx) = self.slot(lo, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            gx[(o * n + arg[o * inner + i]) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::ReduceStd(x, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let xv = self.data(*x);
                if let Some(gx) = self.slot(lo, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let s = y[o * inner + i];
                            if s == 0.0 {
                                continue;
                            }
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let mean = (0..n).map(|k| xv[idx(k)]).sum::<f64>() / n as f64;
                            let go = g[o * inner + i];
                            for k in 0..n {
                                gx[idx(k)] += go * (xv[idx(k)] - mean) / (n as f64 * s);
                            }
                        }
                    }
                }
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                if let Some(gx) = self.slot(lo, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            if log {
                                let gs: f64 = (0..n).map(|k| g[idx(k)]).sum();
                                for k in 0..n {
                                    gx[idx(k)] += g[idx(k)] - y[idx(k)].exp() * gs;
                                }
                            } else {
                                let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                                for k in 0..n {
                                    gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm(x, eps) => {
                let d = *node.value.shape().last().unwrap();
                let xv = self.data(*x);
                if let Some(gx) = self.slot(lo, *x) {
                    for r in 0..g.len() / d {
                        let row = &xv[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let gm = gr.iter().sum::<f64>() / d as f64;
                        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for k in 0..d {
                            gx[r * d + k] += inv * (gr[k] - gm - yr[k] * gy);
                        }
                    }
                }
            }
            Op::Embedding(table, idx) => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.slot(lo, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for k in 0..d {
                            gt[i * d + k] += g[r * d + k];
                        }
                    }
                }
            }
            Op::Select(x, flat) => {
                if let Some(gx) = self.slot(lo, *x) {
                    for (o, &i) in flat.iter().enumerate() {
                        gx[i] += g[o];
                    }
                }
            }
            Op::Conv2d(x, w, b, geom) => {
                let need_dx = self.rg(*x);
                let (dx, dw, db) = conv::conv2d_backward(geom, self.data(*x), self.data(*w), g, need_dx);
                if let (Some(gx), Some(dx)) = (self.slot(lo, *x), dx) {
                    gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                }
                if let Some(gw) = self.slot(lo, *w) {
                    gw.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = b.and_then(|b| self.slot(lo, b)) {
                    gb.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
                }
            }
            Op::DepthwiseConv1d(x, w) => {
                let (sx, k) = (self.shape(*x), self.shape(*w)[1]);
                let (dx, dw) = conv::dwconv1d_backward(self.data(*x), sx[0], sx[1], self.data(*w), k, g);
                if let Some(gx) = self.slot(lo, *x) {
                    gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                }
                if let Some(gw) = self.slot(lo, *w) {
                    gw.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
                }
            }
            Op::Custom(xs, op) => {
                let inputs: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
                let parts = op.backward(&inputs, &node.value, g);
                for (&x, part) in xs.iter().zip(parts) {
                    if let Some(gx) = self.slot(lo, x) {
                        gx.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
