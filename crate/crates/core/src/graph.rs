//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Tape`] records every operation in execution order; node handles are
//! plain indices, so a tape can be replayed backward by walking the node list
//! in reverse. Recording is opt-in per value: [`Tape::leaf`] makes a tracked
//! input that will receive a gradient, [`Tape::constant`] makes an untracked
//! one. Derived nodes track gradients iff any parent does, so wrapping model
//! parameters as constants during attack generation skips all parameter
//! gradient work for free.
//!
//! Every operation validates shapes up front and scans its output for
//! NaN/Inf in one shared place ([`Tape::push`]), so a non-finite value is
//! reported at the operation that produced it rather than downstream.

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, Tensor};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// (m,k) x (k,n) row-major matrix product.
    MatMul(NodeId, NodeId),
    /// Broadcast bias over rank-2 `(B,N)+(N)` or rank-4 `(B,C,H,W)+(C)`.
    BiasAdd(NodeId, NodeId),
    /// Stride-1 same-padded 2d convolution, odd kernel extents only.
    Conv2d(NodeId, NodeId),
    Relu(NodeId),
    /// 2x2 max pooling, stride 2; even spatial extents only. Stores the flat
    /// input index of each selected element for the backward scatter.
    MaxPool2(NodeId, Vec<usize>),
    /// Row-wise softmax over the last axis of a rank-2 tensor.
    Softmax(NodeId),
    /// Row-wise log-softmax over the last axis of a rank-2 tensor.
    LogSoftmax(NodeId),
    /// Full reduction to a scalar.
    Sum(NodeId),
    /// Sum of squares, reduced to a scalar.
    SumSq(NodeId),
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
///
/// A node has an entry iff it required a gradient and lies on a path from a
/// tracked leaf to the loss.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.by_node.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Recorded computation graph. Build values through the op methods, then call
/// [`Tape::backward`] on a scalar loss node. The tape stays valid afterwards,
/// so several losses can be differentiated from one recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked input: receives a gradient from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Untracked input: participates in values only, never in gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Single entry point for derived nodes: finiteness check lives here.
    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[NodeId]) -> Result<NodeId> {
        ensure_finite(op_name, value.data())?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn binary_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * factor);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_parts(vec![m, n], data);
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.value(x).shape().to_vec(), self.value(bias).shape());
        let value = match (sx.as_slice(), sb) {
            ([_, n], [bn]) if n == bn => {
                let cols = *n;
                let bias_data = self.value(bias).data();
                let data = self
                    .value(x)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v + bias_data[i % cols])
                    .collect();
                Tensor::from_parts(sx.clone(), data)
            }
            ([_, c, h, w], [bc]) if c == bc => {
                let plane = h * w;
                let bias_data = self.value(bias).data();
                let data = self
                    .value(x)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v + bias_data[(i / plane) % c])
                    .collect();
                Tensor::from_parts(sx.clone(), data)
            }
            _ => {
                return Err(Error::shape(
                    "bias_add",
                    format!("{:?} + {:?}", sx, sb),
                ))
            }
        };
        self.push("bias_add", value, Op::BiasAdd(x, bias), &[x, bias])
    }

    /// Stride-1 convolution with zero same-padding. Input `(B,Cin,H,W)`,
    /// kernel `(Cout,Cin,kh,kw)` with odd `kh`,`kw`; output `(B,Cout,H,W)`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (sx, sk) = (self.value(x).shape().to_vec(), self.value(kernel).shape().to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} incompatible with kernel {:?}", sx, sk),
            ));
        }
        let (b, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let cols = im2col(self.value(x).data(), b, cin, h, w, kh, kw);
        // (B*H*W, E) x (Cout, E)^T, then permute rows into channel planes.
        let out2 = mm_nt(&cols, self.value(kernel).data(), b * h * w, cin * kh * kw, cout);
        let mut data = vec![0.0; b * cout * h * w];
        let plane = h * w;
        for row in 0..b * plane {
            let (bi, pos) = (row / plane, row % plane);
            for co in 0..cout {
                data[(bi * cout + co) * plane + pos] = out2[row * cout + co];
            }
        }
        let value = Tensor::from_parts(vec![b, cout, h, w], data);
        self.push("conv2d", value, Op::Conv2d(x, kernel), &[x, kernel])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// 2x2 max pooling with stride 2 on `(B,C,H,W)`; `H` and `W` must be even.
    pub fn max_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape(
                "max_pool2",
                format!("rank-4 input with even spatial extents required, got {:?}", s),
            ));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut data = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0usize; data.len()];
        for img in 0..b * c {
            let base = img * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + (2 * ox + dx);
                        if src[idx] > src[best_idx] {
                            best_idx = idx;
                        }
                    }
                    let out_idx = img * oh * ow + oy * ow + ox;
                    data[out_idx] = src[best_idx];
                    argmax[out_idx] = best_idx;
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, oh, ow], data);
        self.push("max_pool2", value, Op::MaxPool2(a, argmax), &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = rowwise_softmax(self.value(a), false)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = rowwise_softmax(self.value(a), true)?;
        self.push("log_softmax", value, Op::LogSoftmax(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn sum_sq(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).data().iter().map(|v| v * v).sum());
        self.push("sum_sq", value, Op::SumSq(a), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; untracked
    /// nodes and nodes off the loss's ancestry have no entry.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::LossNotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            ensure_finite("backward", g.data())?;
        }
        Ok(Gradients { by_node: grads })
    }

    /// Push node `i`'s gradient `g` into its tracked parents.
    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let send = |id: NodeId, contribution: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    for (dst, src) in existing.data_mut().iter_mut().zip(contribution.data()) {
                        *dst += src;
                    }
                }
                slot => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                send(*a, zip_map(g, self.value(*b), |gv, bv| gv * bv), grads);
                send(*b, zip_map(g, self.value(*a), |gv, av| gv * av), grads);
            }
            Op::Scale(a, factor) => {
                send(*a, g.map(|v| v * factor), grads);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = G B^T, dB = A^T G.
                let da = mm_nt(g.data(), self.value(*b).data(), m, n, k);
                let db = mm_tn(self.value(*a).data(), g.data(), m, k, n);
                send(*a, Tensor::from_parts(vec![m, k], da), grads);
                send(*b, Tensor::from_parts(vec![k, n], db), grads);
            }
            Op::BiasAdd(x, bias) => {
                send(*x, g.clone(), grads);
                let sx = self.value(*x).shape();
                let db = match sx.len() {
                    2 => {
                        let n = sx[1];
                        let mut acc = vec![0.0; n];
                        for (i, v) in g.data().iter().enumerate() {
                            acc[i % n] += v;
                        }
                        Tensor::from_parts(vec![n], acc)
                    }
                    _ => {
                        let (c, plane) = (sx[1], sx[2] * sx[3]);
                        let mut acc = vec![0.0; c];
                        for (i, v) in g.data().iter().enumerate() {
                            acc[(i / plane) % c] += v;
                        }
                        Tensor::from_parts(vec![c], acc)
                    }
                };
                send(*bias, db, grads);
            }
            Op::Conv2d(x, kernel) => {
                let sx = self.value(*x).shape();
                let sk = self.value(*kernel).shape();
                let (b, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
                let (rows, e, plane) = (b * h * w, cin * kh * kw, h * w);
                // Permute g back to the (B*H*W, Cout) layout of the forward product.
                let mut g2 = vec![0.0; rows * cout];
                for row in 0..rows {
                    let (bi, pos) = (row / plane, row % plane);
                    for co in 0..cout {
                        g2[row * cout + co] = g.data()[(bi * cout + co) * plane + pos];
                    }
                }
                let cols = im2col(self.value(*x).data(), b, cin, h, w, kh, kw);
                let dk = mm_tn(&g2, &cols, rows, cout, e);
                send(*kernel, Tensor::from_parts(sk.to_vec(), dk), grads);
                if self.nodes[x.0].requires_grad {
                    let dcols = mm_nn(&g2, self.value(*kernel).data(), rows, cout, e);
                    let dx = col2im(&dcols, b, cin, h, w, kh, kw);
                    send(*x, Tensor::from_parts(sx.to_vec(), dx), grads);
                }
            }
            Op::Relu(a) => {
                // Subgradient 0 at the kink.
                let da = zip_map(g, self.value(*a), |gv, av| if av > 0.0 { gv } else { 0.0 });
                send(*a, da, grads);
            }
            Op::MaxPool2(a, argmax) => {
                let mut da = Tensor::zeros(self.value(*a).shape());
                for (out_idx, &src_idx) in argmax.iter().enumerate() {
                    da.data_mut()[src_idx] += g.data()[out_idx];
                }
                send(*a, da, grads);
            }
            Op::Softmax(a) => {
                // ds = s * (g - <g, s> per row)
                let s = &node.value;
                let cols = s.shape()[1];
                let mut da = vec![0.0; s.len()];
                for r in 0..s.shape()[0] {
                    let (sr, gr) = (s.row(r), &g.data()[r * cols..(r + 1) * cols]);
                    let dot: f64 = sr.iter().zip(gr).map(|(sv, gv)| sv * gv).sum();
                    for c in 0..cols {
                        da[r * cols + c] = sr[c] * (gr[c] - dot);
                    }
                }
                send(*a, Tensor::from_parts(s.shape().to_vec(), da), grads);
            }
            Op::LogSoftmax(a) => {
                // dz = g - softmax(z) * (sum of g per row)
                let out = &node.value;
                let cols = out.shape()[1];
                let mut da = vec![0.0; out.len()];
                for r in 0..out.shape()[0] {
                    let (lr, gr) = (out.row(r), &g.data()[r * cols..(r + 1) * cols]);
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        da[r * cols + c] = gr[c] - lr[c].exp() * gsum;
                    }
                }
                send(*a, Tensor::from_parts(out.shape().to_vec(), da), grads);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                send(*a, Tensor::full(self.value(*a).shape(), gv), grads);
            }
            Op::SumSq(a) => {
                let gv = g.data()[0];
                send(*a, self.value(*a).map(|v| 2.0 * v * gv), grads);
            }
            Op::Reshape(a) => {
                send(*a, g.reshape(self.value(*a).shape())?, grads);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn rowwise_softmax(z: &Tensor, log: bool) -> Result<Tensor> {
    if z.rank() != 2 {
        return Err(Error::shape(
            if log { "log_softmax" } else { "softmax" },
            format!("rank-2 input required, got {:?}", z.shape()),
        ));
    }
    let (rows, cols) = (z.shape()[0], z.shape()[1]);
    let mut data = vec![0.0; z.len()];
    for r in 0..rows {
        let row = z.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let out = &mut data[r * cols..(r + 1) * cols];
        if log {
            let log_denom = denom.ln();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v - max - log_denom;
            }
        } else {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp() / denom;
            }
        }
    }
    Ok(Tensor::from_parts(z.shape().to_vec(), data))
}

/// C = A B for row-major (m,k) and (k,n).
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let (brow, crow) = (&b[kk * n..(kk + 1) * n], &mut c[i * n..(i + 1) * n]);
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C = A B^T for row-major (m,k) and (n,k): rows of both operands are
/// contiguous, so each output element is one dot product.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C = A^T B for row-major (k,m) and (k,n).
pub(crate) fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for kk in 0..k {
        let (arow, brow) = (&a[kk * m..(kk + 1) * m], &b[kk * n..(kk + 1) * n]);
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Unfold `(B,C,H,W)` into `(B*H*W, C*kh*kw)` patch rows for a stride-1
/// same-padded convolution. Out-of-bounds taps contribute zeros.
fn im2col(x: &[f64], b: usize, c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let e = c * kh * kw;
    let mut cols = vec![0.0; b * h * w * e];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * e;
                for ci in 0..c {
                    let img = (bi * c + ci) * h * w;
                    for dy in 0..kh {
                        let sy = y + dy;
                        if sy < ph || sy >= h + ph {
                            continue;
                        }
                        let sy = sy - ph;
                        for dx in 0..kw {
                            let sx = xx + dx;
                            if sx < pw || sx >= w + pw {
                                continue;
                            }
                            cols[row + (ci * kh + dy) * kw + dx] = x[img + sy * w + (sx - pw)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into image layout.
fn col2im(cols: &[f64], b: usize, c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let e = c * kh * kw;
    let mut x = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * e;
                for ci in 0..c {
                    let img = (bi * c + ci) * h * w;
                    for dy in 0..kh {
                        let sy = y + dy;
                        if sy < ph || sy >= h + ph {
                            continue;
                        }
                        let sy = sy - ph;
                        for dx in 0..kw {
                            let sx = xx + dx;
                            if sx < pw || sx >= w + pw {
                                continue;
                            }
                            x[img + sy * w + (sx - pw)] += cols[row + (ci * kh + dy) * kw + dx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Central-difference gradient of a scalar function, for checking the tape.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_mul_scale_values_and_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, -1.0]));
        let s = tape.add(a, b).unwrap();
        let p = tape.mul(s, b).unwrap();
        let scaled = tape.scale(p, 2.0).unwrap();
        let loss = tape.sum(scaled).unwrap();
        // loss = 2 * ((a+b) .* b) summed = 2*(4*3 + 1*-1) = 22
        assert_eq!(tape.value(loss).scalar_value().unwrap(), 22.0);
        let grads = tape.backward(loss).unwrap();
        // d/da = 2b, d/db = 2(a + 2b)
        assert_eq!(grads.grad(a).unwrap().data(), &[6.0, -2.0]);
        assert_eq!(grads.grad(b).unwrap().data(), &[14.0, 0.0]);
    }

    #[test]
    fn fanout_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]));
        let c = tape.constant(t(&[1], &[5.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[5.0]);
        assert!(grads.grad(c).is_none());
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        // dA = ones @ B^T, dB = A^T @ ones
        assert_eq!(grads.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn relu_grad_is_zero_at_and_below_kink() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -50.0, 0.0, 50.0]));
        let s = tape.softmax(z).unwrap();
        for r in 0..2 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", r, sum);
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax_and_stable() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1, 3], &[1000.0, 1001.0, 1002.0]));
        let ls = tape.log_softmax(z).unwrap();
        let total: f64 = tape.value(ls).data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z0 = t(&[2, 3], &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4]);
        let w0 = t(&[3, 1], &[0.5, -0.25, 1.5]);
        let mut f = |z: &Tensor| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let zn = tape.leaf(z.clone());
            let s = tape.softmax(zn)?;
            let w = tape.constant(w0.clone());
            let y = tape.matmul(s, w)?;
            let loss = tape.sum_sq(y)?;
            tape.value(loss).scalar_value()
        };
        let fd = finite_difference_gradient(&mut f, &z0, 1e-6).unwrap();

        let mut tape = Tape::new();
        let zn = tape.leaf(z0.clone());
        let s = tape.softmax(zn).unwrap();
        let w = tape.constant(w0);
        let y = tape.matmul(s, w).unwrap();
        let loss = tape.sum_sq(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let got = grads.grad(zn).unwrap();
        for (a, b) in got.data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-7, "tape {} vs fd {}", a, b);
        }
    }

    #[test]
    fn max_pool_takes_block_max_and_routes_gradient() {
        let mut tape = Tape::new();
        #[rustfmt::skip]
        let x = tape.leaf(t(&[1, 1, 4, 4], &[
            1.0, 2.0, 0.0, 0.0,
            3.0, 4.0, 0.0, 5.0,
            0.0, 0.0, 7.0, 6.0,
            0.0, 9.0, 8.0, 0.0,
        ]));
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0, 5.0, 9.0, 8.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.grad(x).unwrap();
        let mut expected = vec![0.0; 16];
        for idx in [5, 7, 13, 14] {
            expected[idx] = 1.0;
        }
        assert_eq!(gx.data(), expected.as_slice());
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        // 1x1x3x3 input, single 3x3 kernel, same padding.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let k = tape.leaf(t(&[1, 1, 3, 3], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]));
        let y = tape.conv2d(x, k).unwrap();
        // Identity kernel reproduces the input.
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let k = tape.leaf(t(&[1, 1, 3, 3], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let y = tape.conv2d(x, k).unwrap();
        // Kernel tap one row above center shifts the image down; the top row
        // reads from the zero padding.
        assert_eq!(
            tape.value(y).data(),
            &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        );
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let x0 = t(
            &[2, 2, 4, 4],
            &(0..64).map(|i| ((i * 37) % 11) as f64 / 10.0 - 0.5).collect::<Vec<_>>(),
        );
        let k0 = t(
            &[3, 2, 3, 3],
            &(0..54).map(|i| ((i * 23) % 13) as f64 / 13.0 - 0.4).collect::<Vec<_>>(),
        );

        let eval = |x: &Tensor, k: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let kn = tape.constant(k.clone());
            let y = tape.conv2d(xn, kn).unwrap();
            let loss = tape.sum_sq(y).unwrap();
            tape.value(loss).scalar_value().unwrap()
        };

        let mut tape = Tape::new();
        let xn = tape.leaf(x0.clone());
        let kn = tape.leaf(k0.clone());
        let y = tape.conv2d(xn, kn).unwrap();
        let loss = tape.sum_sq(y).unwrap();
        let grads = tape.backward(loss).unwrap();

        let k_fixed = k0.clone();
        let mut fx = |x: &Tensor| -> crate::error::Result<f64> { Ok(eval(x, &k_fixed)) };
        let fd_x = finite_difference_gradient(&mut fx, &x0, 1e-6).unwrap();
        for (a, b) in grads.grad(xn).unwrap().data().iter().zip(fd_x.data()) {
            assert!((a - b).abs() < 1e-6, "dx tape {} vs fd {}", a, b);
        }

        let x_fixed = x0.clone();
        let mut fk = |k: &Tensor| -> crate::error::Result<f64> { Ok(eval(&x_fixed, k)) };
        let fd_k = finite_difference_gradient(&mut fk, &k0, 1e-6).unwrap();
        for (a, b) in grads.grad(kn).unwrap().data().iter().zip(fd_k.data()) {
            assert!((a - b).abs() < 1e-6, "dk tape {} vs fd {}", a, b);
        }
    }

    #[test]
    fn bias_add_gradients_reduce_over_broadcast_axes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0; 6]));
        let b = tape.leaf(t(&[3], &[0.1, 0.2, 0.3]));
        let y = tape.bias_add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.1, 1.2, 1.3, 1.1, 1.2, 1.3]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2, 2, 2]));
        let b = tape.leaf(t(&[2], &[1.0, -1.0]));
        let y = tape.bias_add(x, b).unwrap();
        // Channel planes are H*W = 4 elements wide.
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]
        );
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(b).unwrap().data(), &[8.0, 8.0]);
    }

    #[test]
    fn sum_sq_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let loss = tape.sum_sq(x).unwrap();
        assert_eq!(tape.value(loss).scalar_value().unwrap(), 5.25);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn tape_supports_multiple_backward_passes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let l1 = tape.sum(x).unwrap();
        let l2 = tape.sum_sq(x).unwrap();
        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        assert_eq!(g1.grad(x).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g2.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn reshape_round_trips_gradient_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let flat = tape.reshape(x, &[4]).unwrap();
        let loss = tape.sum_sq(flat).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(x).unwrap().shape(), &[2, 2]);
    }
}
