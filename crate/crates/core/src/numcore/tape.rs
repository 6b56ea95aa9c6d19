//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! only ever appended, so the tape is always in topological order and the
//! backward pass is a single reverse sweep. An operation whose inputs are all
//! constants is stored as a constant and never visited by `backward`.

use super::gemm::gemm;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Abs(Var),
    Log(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        pre: usize,
        axis_len: usize,
        post: usize,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        pre: usize,
        axis_len: usize,
        post: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Transpose {
        x: Var,
        d0: usize,
        d1: usize,
    },
    AvgPool2x2(Var),
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single-threaded computation record. One tape serves one forward and at
/// most one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Swaps axes `d0` and `d1` of a row-major buffer with shape `shape`.
fn swap_axes(data: &[f64], shape: &[usize], d0: usize, d1: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let mut src_strides = strides(shape);
    src_strides.swap(d0, d1);
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        let op = if requires_grad { op } else { Op::Leaf };
        let mut value = Tensor::new(shape, data).expect("op produced inconsistent tensor");
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut value = tensor;
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Copies a parameter onto the tape, keeping its `requires_grad` flag.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec()).expect("valid tensor");
        t.requires_grad = tensor.requires_grad;
        self.leaf(t)
    }

    /// A gradient-free copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
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

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Gradient of the backward root w.r.t. `v`, if one was computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a])
    }

    /// Matrix product over the last two axes.
    ///
    /// Either `b` is `[K, N]` and shared by every leading row of `a`
    /// (`[.., M, K]`), or both operands are `[B, M, K]` and `[B, K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 {
            return Err(err());
        }
        match sb.len() {
            2 => {
                let k = sa[sa.len() - 1];
                if sb[0] != k {
                    return Err(err());
                }
                let n = sb[1];
                let m = numel(&sa[..sa.len() - 1]);
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(n);
                let op = Op::MatMul {
                    a,
                    b,
                    batch: 1,
                    m,
                    k,
                    n,
                    shared_rhs: true,
                };
                Ok(self.push(shape, out, op, &[a, b]))
            }
            3 => {
                if sa.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(err());
                }
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let mut out = vec![0.0; batch * m * n];
                let (da, db) = (self.data(a), self.data(b));
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &da[i * m * k..(i + 1) * m * k],
                        false,
                        &db[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
                let op = Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    shared_rhs: false,
                };
                Ok(self.push(vec![batch, m, n], out, op, &[a, b]))
            }
            _ => Err(err()),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip_with(a, b, Op::Div(a, b), |x, y| x / y))
    }

    /// Scalar times tensor.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    /// Adds `bias` to every trailing block of `x`. `bias.shape` must equal
    /// the trailing axes of `x.shape` exactly.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let width = numel(sb);
        let bdata = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bdata[i % width])
            .collect();
        let shape = sx.to_vec();
        Ok(self.push(shape, data, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    /// `max(x, floor)`; values below the floor pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, Op::ClampMin(a, floor), |x| if x < floor { floor } else { x })
    }

    fn last_dim(&self, op: &str, a: Var) -> Result<usize> {
        self.shape(a)
            .last()
            .copied()
            .ok_or_else(|| Error::Config(format!("{op}: scalar input has no last axis")))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let cols = self.last_dim("softmax_lastdim", a)?;
        let data = softmax_rows(self.data(a), cols);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let cols = self.last_dim("log_softmax_lastdim", a)?;
        let mut data = Vec::with_capacity(self.value(a).len());
        for row in self.data(a).chunks(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::LogSoftmax(a), &[a]))
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// the per-feature affine `gamma * xhat + beta`.
    pub fn layernorm_lastdim(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.last_dim("layernorm_lastdim", x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(Error::shape("layernorm_lastdim", self.shape(x), self.shape(p)));
            }
        }
        let xd = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = xd.len() / cols;
        let mut xhat = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(shape, out, op, &[x, gamma, beta]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    /// Mean of all elements, as a scalar. Summation is sequential in buffer
    /// order.
    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Vec::new(), vec![s], Op::Mean(a), &[a])
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Config(format!(
                "mean_axis: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (pre, axis_len, post) = split_axis(&shape, axis);
        let d = self.data(a);
        let mut out = vec![0.0; pre * post];
        for p in 0..pre {
            for i in 0..axis_len {
                let src = &d[(p * axis_len + i) * post..(p * axis_len + i + 1) * post];
                for (o, &v) in out[p * post..(p + 1) * post].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / axis_len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let op = Op::MeanAxis {
            x: a,
            pre,
            axis_len,
            post,
        };
        Ok(self.push(out_shape, out, op, &[a]))
    }

    /// Concatenates along the last axis. Leading axes must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat_lastdim: no inputs".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(Error::shape("concat_lastdim", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), parts))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Config(format!(
                "slice: range {start}..{} on axis {axis} invalid for shape {shape:?}",
                start + len
            )));
        }
        let (pre, axis_len, post) = split_axis(&shape, axis);
        let d = self.data(a);
        let mut out = Vec::with_capacity(pre * len * post);
        for p in 0..pre {
            let base = (p * axis_len + start) * post;
            out.extend_from_slice(&d[base..base + len * post]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let op = Op::Slice {
            x: a,
            pre,
            axis_len,
            post,
            start,
            len,
        };
        Ok(self.push(out_shape, out, op, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(Error::Config(format!(
                "transpose: axes ({d0}, {d1}) out of range for shape {shape:?}"
            )));
        }
        let (data, out_shape) = swap_axes(self.data(a), &shape, d0, d1);
        Ok(self.push(out_shape, data, Op::Transpose { x: a, d0, d1 }, &[a]))
    }

    /// Non-overlapping 2x2 mean over the last two axes of `[n, c, h, w]`.
    pub fn avgpool2x2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "avgpool2x2: expected [n, c, even, even], got {s:?}"
            )));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let d = self.data(a);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &d[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let tl = plane[2 * i * w + 2 * j];
                    let tr = plane[2 * i * w + 2 * j + 1];
                    let bl = plane[(2 * i + 1) * w + 2 * j];
                    let br = plane[(2 * i + 1) * w + 2 * j + 1];
                    out.push((tl + tr + bl + br) * 0.25);
                }
            }
        }
        Ok(self.push(vec![s[0], s[1], oh, ow], out, Op::AvgPool2x2(a), &[a]))
    }

    /// Selects rows of a `[R, D]` tensor; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || indices.is_empty() {
            return Err(Error::Config(format!(
                "gather_rows: expected a matrix and at least one index, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Config(format!(
                "gather_rows: index {bad} out of bounds for {rows} rows"
            )));
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let op = Op::GatherRows {
            x: a,
            indices: indices.to_vec(),
        };
        Ok(self.push(vec![indices.len(), cols], out, op, &[a]))
    }

    /// Populates gradients of `root` w.r.t. every reachable tracked node.
    ///
    /// `root` must be a 0-dimensional tensor. A tape supports one backward
    /// pass; build a new tape for the next step.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; record a fresh tape".into(),
            ));
        }
        if !self.shape(root).is_empty() {
            return Err(Error::Usage(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.requires_grad(root) {
            return Ok(());
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                node.value.grad = g;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].value.requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        macro_rules! buf {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![0.0; nodes[$v.0].value.len()])
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                if shared_rhs {
                    if needs(a) {
                        // dA[m,k] = G[m,n] * B^T
                        gemm(m, n, k, g, false, val(b), true, buf!(a), 1.0);
                    }
                    if needs(b) {
                        // dB[k,n] = A^T * G
                        gemm(k, m, n, val(a), true, g, false, buf!(b), 1.0);
                    }
                } else {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        if needs(a) {
                            let bs = &val(b)[bi * k * n..(bi + 1) * k * n];
                            let da = &mut buf!(a)[bi * m * k..(bi + 1) * m * k];
                            gemm(m, n, k, gs, false, bs, true, da, 1.0);
                        }
                        if needs(b) {
                            let as_ = &val(a)[bi * m * k..(bi + 1) * m * k];
                            let db = &mut buf!(b)[bi * k * n..(bi + 1) * k * n];
                            gemm(k, m, n, as_, true, gs, false, db, 1.0);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    acc(buf!(a), g);
                }
                if needs(b) {
                    acc(buf!(b), g);
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    acc(buf!(a), g);
                }
                if needs(b) {
                    buf!(b).iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let (bd, da) = (val(b), buf!(a));
                    for j in 0..g.len() {
                        da[j] += g[j] * bd[j];
                    }
                }
                if needs(b) {
                    let (ad, db) = (val(a), buf!(b));
                    for j in 0..g.len() {
                        db[j] += g[j] * ad[j];
                    }
                }
            }
            &Op::Div(a, b) => {
                if needs(a) {
                    let (bd, da) = (val(b), buf!(a));
                    for j in 0..g.len() {
                        da[j] += g[j] / bd[j];
                    }
                }
                if needs(b) {
                    let (ad, bd) = (val(a), val(b));
                    let db = buf!(b);
                    for j in 0..g.len() {
                        db[j] -= g[j] * ad[j] / (bd[j] * bd[j]);
                    }
                }
            }
            &Op::Scale(a, s) => {
                buf!(a).iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * s);
            }
            &Op::AddBias(x, bias) => {
                if needs(x) {
                    acc(buf!(x), g);
                }
                if needs(bias) {
                    let db = buf!(bias);
                    let w = db.len();
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % w] += gv;
                    }
                }
            }
            &Op::Relu(a) => {
                let ad = val(a);
                let da = buf!(a);
                for j in 0..g.len() {
                    if ad[j] > 0.0 {
                        da[j] += g[j];
                    }
                }
            }
            &Op::Abs(a) => {
                let ad = val(a);
                let da = buf!(a);
                for j in 0..g.len() {
                    // subgradient 0 at exactly 0
                    if ad[j] > 0.0 {
                        da[j] += g[j];
                    } else if ad[j] < 0.0 {
                        da[j] -= g[j];
                    }
                }
            }
            &Op::Log(a) => {
                let ad = val(a);
                let da = buf!(a);
                for j in 0..g.len() {
                    da[j] += g[j] / ad[j];
                }
            }
            &Op::ClampMin(a, floor) => {
                let ad = val(a);
                let da = buf!(a);
                for j in 0..g.len() {
                    if ad[j] >= floor {
                        da[j] += g[j];
                    }
                }
            }
            &Op::Softmax(a) => {
                let cols = *nodes[i].value.shape().last().unwrap();
                let da = buf!(a);
                for ((y, gr), d) in out.chunks(cols).zip(g.chunks(cols)).zip(da.chunks_mut(cols)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let cols = *nodes[i].value.shape().last().unwrap();
                let da = buf!(a);
                for ((y, gr), d) in out.chunks(cols).zip(g.chunks(cols)).zip(da.chunks_mut(cols)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        d[j] += gr[j] - y[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = val(*gamma).len();
                if needs(*gamma) {
                    let dg = buf!(*gamma);
                    for (j, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[j % cols] += gv * h;
                    }
                }
                if needs(*beta) {
                    let db = buf!(*beta);
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % cols] += gv;
                    }
                }
                if needs(*x) {
                    let gam = val(*gamma);
                    let dx = buf!(*x);
                    let mut dxhat = vec![0.0; cols];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        let dst = &mut dx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dst[j] += is * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                let gv = g[0];
                buf!(a).iter_mut().for_each(|d| *d += gv);
            }
            &Op::Mean(a) => {
                let da = buf!(a);
                let gv = g[0] / da.len() as f64;
                da.iter_mut().for_each(|d| *d += gv);
            }
            &Op::MeanAxis { x, pre, axis_len, post } => {
                let inv = 1.0 / axis_len as f64;
                let dx = buf!(x);
                for p in 0..pre {
                    let gs = &g[p * post..(p + 1) * post];
                    for a in 0..axis_len {
                        let dst = &mut dx[(p * axis_len + a) * post..(p * axis_len + a + 1) * post];
                        for (d, &gv) in dst.iter_mut().zip(gs) {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| *nodes[p.0].value.shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if needs(p) {
                        let dp = buf!(p);
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            acc(&mut dp[r * w..(r + 1) * w], src);
                        }
                    }
                    off += w;
                }
            }
            &Op::Slice {
                x,
                pre,
                axis_len,
                post,
                start,
                len,
            } => {
                let dx = buf!(x);
                for p in 0..pre {
                    let base = (p * axis_len + start) * post;
                    acc(
                        &mut dx[base..base + len * post],
                        &g[p * len * post..(p + 1) * len * post],
                    );
                }
            }
            &Op::Reshape(a) => acc(buf!(a), g),
            &Op::Transpose { x, d0, d1 } => {
                let (back, _) = swap_axes(g, nodes[i].value.shape(), d0, d1);
                acc(buf!(x), &back);
            }
            &Op::AvgPool2x2(a) => {
                let s = nodes[a.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let da = buf!(a);
                for p in 0..planes {
                    for r in 0..oh {
                        for c in 0..ow {
                            let q = g[p * oh * ow + r * ow + c] * 0.25;
                            let base = p * h * w;
                            da[base + 2 * r * w + 2 * c] += q;
                            da[base + 2 * r * w + 2 * c + 1] += q;
                            da[base + (2 * r + 1) * w + 2 * c] += q;
                            da[base + (2 * r + 1) * w + 2 * c + 1] += q;
                        }
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                let cols = nodes[x.0].value.shape()[1];
                let dx = buf!(*x);
                for (r, &src) in indices.iter().enumerate() {
                    acc(&mut dx[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
        }
    }
}

fn acc(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn avgpool_of_identical_vectors() {
        // 1 image, 3 channels, 2x2 grid whose every cell holds v = (1, -2, 5)
        let v = [1.0, -2.0, 5.0];
        let data: Vec<f64> = v.iter().flat_map(|&c| [c; 4]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 2, 2], &data));
        let y = tape.avgpool2x2(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 1, 1]);
        assert_eq!(tape.data(y), &v);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_abs_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2.0, -3.0]).with_grad());
        let a = tape.abs(x);
        let y = tape.mean(a);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5, -0.5]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]).with_grad());
        let a = tape.abs(x);
        let y = tape.sum(a);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"),
            "{err}"
        );
        let c = tape.constant(Tensor::zeros(&[4, 4]));
        let err = tape.matmul(a, c).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn constant_inputs_record_no_gradient_path() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.relu(a);
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn transpose_and_reshape_round_trip_bit_exact() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64).sqrt() * 1.1).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = tape.transpose(x, 0, 2).unwrap();
        assert_eq!(tape.shape(y), &[4, 3, 2]);
        let z = tape.transpose(y, 0, 2).unwrap();
        assert_eq!(tape.data(z), &data[..]);
        let r = tape.reshape(x, &[6, 4]).unwrap();
        let r2 = tape.reshape(r, &[2, 3, 4]).unwrap();
        assert_eq!(tape.data(r2), &data[..]);
        let s0 = tape.slice(x, 1, 0, 2).unwrap();
        let s1 = tape.slice(x, 1, 2, 1).unwrap();
        let s0t = tape.transpose(s0, 1, 2).unwrap();
        let s1t = tape.transpose(s1, 1, 2).unwrap();
        let joined = tape.concat_lastdim(&[s0t, s1t]).unwrap();
        let back = tape.transpose(joined, 1, 2).unwrap();
        assert_eq!(tape.data(back), &data[..]);
    }

    #[test]
    fn transpose_moves_elements() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.transpose(x, 0, 1).unwrap();
        assert_eq!(tape.data(y), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gather_rows_out_of_bounds() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.gather_rows(x, &[0, 3]).is_err());
    }

    #[test]
    fn layernorm_output_is_normalized() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]));
        let g = tape.constant(Tensor::filled(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layernorm_lastdim(x, g, b).unwrap();
        for row in tape.data(y).chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
