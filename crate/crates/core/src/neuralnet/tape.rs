//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; node ids are therefore a
//! topological order, and [`Tape::backward`] walks them in exact reverse
//! recording order. Gradients are accumulated in place into each parent's
//! buffer, so slicing one large activation many times stays linear in size.

use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    /// `a·x + b`
    Affine(Var, f64),
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        src: Var,
        index: Arc<[usize]>,
    },
    SegmentSoftmax {
        src: Var,
        offsets: Arc<[usize]>,
    },
    EdgeWeightedSum {
        weights: Var,
        values: Var,
        index: Arc<[usize]>,
        offsets: Arc<[usize]>,
    },
    Propagate {
        adj: Arc<Tensor>,
        src: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
    },
    MaskedMse {
        pred: Var,
        target: Arc<Tensor>,
        mask: Arc<[bool]>,
        count: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// (outer, axis length, inner) strides of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn zip_map(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + b` with `b` broadcast along every leading axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.ndim() != 1 || tb.len() != n {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            row.iter_mut().zip(tb.data()).for_each(|(o, &bv)| *o += bv);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `x[b, c, ..] + bias[c]` for `x` of shape `[B, C, ..]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.ndim() < 2 || tb.ndim() != 1 || tb.len() != tx.shape()[1] {
            return Err(Error::shape("add_channel_bias", tx.shape(), tb.shape()));
        }
        let inner: usize = tx.shape()[2..].iter().product();
        let mut out = tx.clone();
        let c = tb.len();
        for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let bv = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddChannelBias(x, b), rg))
    }

    /// `scale·x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = scale * *v + shift);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, scale), rg)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Slice { src: x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Rows of a 2-D tensor selected by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let t = self.value(x);
        let (n, f) = t.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(index.len() * f);
        for &i in index.iter() {
            if i >= n {
                return Err(Error::InvalidArgument(format!("gather index {i} >= {n}")));
            }
            data.extend_from_slice(&t.data()[i * f..(i + 1) * f]);
        }
        let out = Tensor::new([index.len(), f], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GatherRows { src: x, index }, rg))
    }

    /// Softmax within each segment `offsets[s]..offsets[s+1]` of the flattened input.
    pub fn segment_softmax(&mut self, x: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let t = self.value(x);
        check_offsets(&offsets, t.len())?;
        let mut out = t.clone();
        for w in offsets.windows(2) {
            let seg = &mut out.data_mut()[w[0]..w[1]];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in seg.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            seg.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SegmentSoftmax { src: x, offsets }, rg))
    }

    /// `out[s] = Σ_{e in segment s} weights[e] · values[index[e]]`.
    pub fn edge_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        index: Arc<[usize]>,
        offsets: Arc<[usize]>,
    ) -> Result<Var> {
        let (tw, tv) = (self.value(weights), self.value(values));
        let (n, f) = tv.dims2("edge_weighted_sum")?;
        if tw.len() != index.len() {
            return Err(Error::shape("edge_weighted_sum", tw.shape(), &[index.len()]));
        }
        check_offsets(&offsets, index.len())?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("edge index {bad} >= {n}")));
        }
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * f];
        for s in 0..segs {
            let row = &mut out[s * f..(s + 1) * f];
            for e in offsets[s]..offsets[s + 1] {
                let w = tw.data()[e];
                let src = &tv.data()[index[e] * f..(index[e] + 1) * f];
                row.iter_mut().zip(src).for_each(|(o, &v)| *o += w * v);
            }
        }
        let out = Tensor::new([segs, f], out)?;
        let rg = self.rg(&[weights, values]);
        Ok(self.push(
            out,
            Op::EdgeWeightedSum {
                weights,
                values,
                index,
                offsets,
            },
            rg,
        ))
    }

    /// Applies a constant `n×n` matrix to each consecutive block of `n` rows
    /// of `x` (shape `[blocks·n, f]`).
    pub fn propagate(&mut self, adj: Arc<Tensor>, x: Var) -> Result<Var> {
        let (n, n2) = adj.dims2("propagate")?;
        let t = self.value(x);
        let (rows, f) = t.dims2("propagate")?;
        if n != n2 || n == 0 || rows % n != 0 {
            return Err(Error::shape("propagate", adj.shape(), t.shape()));
        }
        let mut out = vec![0.0; rows * f];
        for (xb, ob) in t.data().chunks(n * f).zip(out.chunks_mut(n * f)) {
            gemm(false, false, n, f, n, adj.data(), xb, ob, 0.0);
        }
        let out = Tensor::new([rows, f], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Propagate { adj, src: x }, rg))
    }

    /// Zero-padded "same" 2-D convolution (cross-correlation) with odd kernels.
    /// `input` is `[B, C_in, H, W]`, `kernel` is `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let geo = ConvGeometry::new(ti.shape(), tk.shape())?;
        let mut out = vec![0.0; geo.batch * geo.c_out * geo.hw()];
        let mut cols = vec![0.0; geo.patch() * geo.hw()];
        for b in 0..geo.batch {
            geo.im2col(&ti.data()[b * geo.in_len()..(b + 1) * geo.in_len()], &mut cols);
            let ob = &mut out[b * geo.c_out * geo.hw()..(b + 1) * geo.c_out * geo.hw()];
            gemm(false, false, geo.c_out, geo.hw(), geo.patch(), tk.data(), &cols, ob, 0.0);
        }
        let out = Tensor::new([geo.batch, geo.c_out, geo.h, geo.w], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(out, Op::Conv2d { input, kernel }, rg))
    }

    /// Mean squared error over entries where `mask` is true; zero (with zero
    /// gradient) when no entry is selected.
    pub fn masked_mse(&mut self, pred: Var, target: Arc<Tensor>, mask: Arc<[bool]>) -> Result<Var> {
        let tp = self.value(pred);
        same_shape("masked_mse", tp, &target)?;
        if mask.len() != tp.len() {
            return Err(Error::shape("masked_mse", tp.shape(), &[mask.len()]));
        }
        let mut sum = 0.0;
        let mut count = 0;
        for ((&p, &t), &m) in tp.data().iter().zip(target.data()).zip(mask.iter()) {
            if m {
                sum += (p - t) * (p - t);
                count += 1;
            }
        }
        let loss = if count > 0 { sum / count as f64 } else { 0.0 };
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.backprop_node(node, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, lower: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc(&self.nodes, lower, *a) {
                    axpy(ga.data_mut(), 1.0, gd);
                }
                if let Some(gb) = acc(&self.nodes, lower, *b) {
                    axpy(gb.data_mut(), 1.0, gd);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(&self.nodes, lower, *a) {
                    axpy(ga.data_mut(), 1.0, gd);
                }
                if let Some(gb) = acc(&self.nodes, lower, *b) {
                    axpy(gb.data_mut(), -1.0, gd);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if let Some(ga) = acc(&self.nodes, lower, *a) {
                    for ((o, &gi), &bi) in ga.data_mut().iter_mut().zip(gd).zip(vb) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = acc(&self.nodes, lower, *b) {
                    for ((o, &gi), &ai) in gb.data_mut().iter_mut().zip(gd).zip(va) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = acc(&self.nodes, lower, *x) {
                    axpy(gx.data_mut(), 1.0, gd);
                }
                if let Some(gb) = acc(&self.nodes, lower, *b) {
                    let n = gb.len();
                    for row in gd.chunks(n.max(1)) {
                        axpy(gb.data_mut(), 1.0, row);
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                if let Some(gx) = acc(&self.nodes, lower, *x) {
                    axpy(gx.data_mut(), 1.0, gd);
                }
                if let Some(gb) = acc(&self.nodes, lower, *b) {
                    let c = gb.len();
                    let inner: usize = node.value.shape()[2..].iter().product();
                    for (i, chunk) in gd.chunks(inner.max(1)).enumerate() {
                        gb.data_mut()[i % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Affine(x, scale) => {
                if let Some(gx) = acc(&self.nodes, lower, *x) {
                    axpy(gx.data_mut(), *scale, gd);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = acc(&self.nodes, lower, *a) {
                    // dA = G · Bᵀ
                    gemm(false, true, m, k, n, gd, tb.data(), ga.data_mut(), 1.0);
                }
                if let Some(gb) = acc(&self.nodes, lower, *b) {
                    // dB = Aᵀ · G
                    gemm(true, false, k, n, m, ta.data(), gd, gb.data_mut(), 1.0);
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = acc(&self.nodes, lower, *x) {
                    for ((o, &gi), &yi) in gx.data_mut().iter_mut().zip(gd).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = acc(&self.nodes, lower, *x) {
                    for ((o, &gi), &yi) in gx.data_mut().iter_mut().zip(gd).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                if let Some(gx) = acc(&self.nodes, lower, *x) {
                    for ((o, &gi), &xi) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x).data();
                if let Some(gx) = acc(&self.nodes, lower, *x) {
                    for ((o, &gi), &xi) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        *o += if xi > 0.0 { gi } else { slope * gi };
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = val(p).shape()[*axis];
                    if let Some(gp) = acc(&self.nodes, lower, p) {
                        let chunk = plen * inner;
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..][..chunk];
                            axpy(&mut gp.data_mut()[o * chunk..(o + 1) * chunk], 1.0, src);
                        }
                    }
                    offset += plen;
                }
            }
            Op::Slice { src, axis, start } => {
                let src_shape = val(*src).shape().to_vec();
                let (outer, alen, inner) = split_axis(&src_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(gs) = acc(&self.nodes, lower, *src) {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        let chunk = len * inner;
                        axpy(&mut gs.data_mut()[base..base + chunk], 1.0, &gd[o * chunk..(o + 1) * chunk]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc(&self.nodes, lower, *x) {
                    axpy(gx.data_mut(), 1.0, gd);
                }
            }
            Op::GatherRows { src, index } => {
                let f = node.value.shape()[1];
                if let Some(gs) = acc(&self.nodes, lower, *src) {
                    let gsd = gs.data_mut();
                    for (r, &i) in index.iter().enumerate() {
                        axpy(&mut gsd[i * f..(i + 1) * f], 1.0, &gd[r * f..(r + 1) * f]);
                    }
                }
            }
            Op::SegmentSoftmax { src, offsets } => {
                let y = node.value.data();
                if let Some(gs) = acc(&self.nodes, lower, *src) {
                    let gsd = gs.data_mut();
                    for w in offsets.windows(2) {
                        let dot: f64 = (w[0]..w[1]).map(|e| gd[e] * y[e]).sum();
                        for e in w[0]..w[1] {
                            gsd[e] += y[e] * (gd[e] - dot);
                        }
                    }
                }
            }
            Op::EdgeWeightedSum {
                weights,
                values,
                index,
                offsets,
            } => {
                let tv = val(*values);
                let f = tv.shape()[1];
                let tw = val(*weights).data();
                if let Some(gw) = acc(&self.nodes, lower, *weights) {
                    let gwd = gw.data_mut();
                    for s in 0..offsets.len() - 1 {
                        let gs = &gd[s * f..(s + 1) * f];
                        for e in offsets[s]..offsets[s + 1] {
                            let v = &tv.data()[index[e] * f..(index[e] + 1) * f];
                            gwd[e] += gs.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(gv) = acc(&self.nodes, lower, *values) {
                    let gvd = gv.data_mut();
                    for s in 0..offsets.len() - 1 {
                        let gs = &gd[s * f..(s + 1) * f];
                        for e in offsets[s]..offsets[s + 1] {
                            axpy(&mut gvd[index[e] * f..(index[e] + 1) * f], tw[e], gs);
                        }
                    }
                }
            }
            Op::Propagate { adj, src } => {
                let n = adj.shape()[0];
                let f = node.value.shape()[1];
                if let Some(gs) = acc(&self.nodes, lower, *src) {
                    for (gb, ob) in gd.chunks(n * f).zip(gs.data_mut().chunks_mut(n * f)) {
                        // dX = Aᵀ · G
                        gemm(true, false, n, f, n, adj.data(), gb, ob, 1.0);
                    }
                }
            }
            Op::Conv2d { input, kernel } => {
                let (ti, tk) = (val(*input), val(*kernel));
                let geo = ConvGeometry::new(ti.shape(), tk.shape()).expect("validated in forward");
                let mut cols = vec![0.0; geo.patch() * geo.hw()];
                let out_len = geo.c_out * geo.hw();
                if self.nodes[kernel.0].requires_grad {
                    let gk = acc(&self.nodes, lower, *kernel).expect("requires grad");
                    for b in 0..geo.batch {
                        geo.im2col(&ti.data()[b * geo.in_len()..(b + 1) * geo.in_len()], &mut cols);
                        // dK += dOut_b · colsᵀ
                        gemm(
                            false,
                            true,
                            geo.c_out,
                            geo.patch(),
                            geo.hw(),
                            &gd[b * out_len..(b + 1) * out_len],
                            &cols,
                            gk.data_mut(),
                            1.0,
                        );
                    }
                }
                if let Some(gi) = acc(&self.nodes, lower, *input) {
                    for b in 0..geo.batch {
                        // dcols = Kᵀ · dOut_b
                        gemm(
                            true,
                            false,
                            geo.patch(),
                            geo.hw(),
                            geo.c_out,
                            tk.data(),
                            &gd[b * out_len..(b + 1) * out_len],
                            &mut cols,
                            0.0,
                        );
                        geo.col2im_add(&cols, &mut gi.data_mut()[b * geo.in_len()..(b + 1) * geo.in_len()]);
                    }
                }
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = 2.0 * gd[0] / *count as f64;
                let pv = val(*pred).data();
                if let Some(gp) = acc(&self.nodes, lower, *pred) {
                    for (i, o) in gp.data_mut().iter_mut().enumerate() {
                        if mask[i] {
                            *o += scale * (pv[i] - target.data()[i]);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(&self.nodes, lower, *x) {
                    gx.data_mut().iter_mut().for_each(|o| *o += gd[0]);
                }
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], lower: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let shape = nodes[v.0].value.shape();
    Some(lower[v.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec())))
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    y.iter_mut().zip(x).for_each(|(yi, &xi)| *yi += a * xi);
}

fn check_offsets(offsets: &[usize], len: usize) -> Result<()> {
    let ok = offsets.first() == Some(&0)
        && offsets.last() == Some(&len)
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "segment offsets must run from 0 to {len} non-decreasing"
        )))
    }
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize]) -> Result<Self> {
        let (&[batch, c_in, h, w], &[c_out, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::shape("conv2d", input, kernel));
        };
        if kc != c_in || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", input, kernel));
        }
        Ok(ConvGeometry {
            batch,
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
        })
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn in_len(&self) -> usize {
        self.c_in * self.hw()
    }

    /// cols[(c, ki, kj), (y, x)] = input[c, y + ki - ph, x + kj - pw] (zero outside).
    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let hw = self.hw();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * hw;
                    for y in 0..self.h {
                        let sy = y as isize + ki as isize - ph as isize;
                        let dst = &mut cols[row + y * self.w..row + (y + 1) * self.w];
                        if sy < 0 || sy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &input[(c * self.h + sy as usize) * self.w..][..self.w];
                        for (x, d) in dst.iter_mut().enumerate() {
                            let sx = x as isize + kj as isize - pw as isize;
                            *d = if sx >= 0 && sx < self.w as isize { src[sx as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], input_grad: &mut [f64]) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let hw = self.hw();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * hw;
                    for y in 0..self.h {
                        let sy = y as isize + ki as isize - ph as isize;
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut input_grad[(c * self.h + sy as usize) * self.w..][..self.w];
                        for x in 0..self.w {
                            let sx = x as isize + kj as isize - pw as isize;
                            if sx >= 0 && sx < self.w as isize {
                                dst[sx as usize] += cols[row + y * self.w + x];
                            }
                        }
                    }
                }
            }
        }
    }
}
