//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node whose inputs are strictly earlier nodes, so the
//! node vector is topologically ordered and backprop is a single reverse
//! sweep.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, f64),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Log(Var),
    Exp(Var),
    SoftmaxLast { x: Var, width: usize },
    SumAll(Var),
    MeanAll(Var),
    BroadcastTo { x: Var, map: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
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

    /// Records `tensor` as an input. Gradients are tracked iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// A differentiable input whose gradient is read back after [`Tape::backward`].
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Copies the value of `x` into a fresh constant; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = Tensor::new(self.shape(x), self.values(x).to_vec()).unwrap();
        self.constant(t)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn values(&self, x: Var) -> &[f64] {
        self.nodes[x.0].value.values()
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn grad(&self, x: Var) -> &[f64] {
        self.nodes[x.0].value.grad()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    fn push(&mut self, name: &'static str, shape: &[usize], values: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, values)?.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", &shape, v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push("sub", &shape, v, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul_elementwise", a, b)?;
        let v = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul_elementwise", &shape, v, Op::Mul(a, b), &[a, b])
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.values(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", &shape, v, Op::Scale(a, factor), &[a])
    }

    /// Division by a constant scalar (correctly rounded, unlike scaling by
    /// the reciprocal).
    pub fn div_scalar(&mut self, a: Var, divisor: f64) -> Result<Var> {
        if divisor == 0.0 || !divisor.is_finite() {
            return Err(Error::invalid("div_scalar", format!("invalid divisor {divisor}")));
        }
        let v = self.values(a).iter().map(|x| x / divisor).collect();
        let shape = self.shape(a).to_vec();
        self.push("div_scalar", &shape, v, Op::DivScalar(a, divisor), &[a])
    }

    /// `(m×k) · (k×n)` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.values(a), false, self.values(b), false, &mut out, false);
        self.push("matmul", &[m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", s, &[0, 0]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.values(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        self.push("transpose", &[cols, rows], out, Op::Transpose { x, rows, cols }, &[x])
    }

    /// NCHW input, OIHW kernel, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", sx, sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (h, wd, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h,
            w: wd,
            o: sw[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (out, cols) = kernels::conv2d_forward(&geom, self.values(x), self.values(w));
        let shape = [geom.n, geom.o, geom.oh, geom.ow];
        self.push("conv2d", &shape, out, Op::Conv2d { x, w, geom, cols }, &[x, w])
    }

    /// 2×2 max pooling with stride 2 over NCHW; odd trailing rows/cols are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("max_pool2", s, &[2, 2]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.values(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        self.push("max_pool2", &[n, c, oh, ow], out, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.values(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", &shape, v, Op::Relu(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.values(x).iter().find(|&&v| v <= 0.0) {
            return Err(Error::invalid("log", format!("non-positive input {bad}")));
        }
        let v = self.values(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push("log", &shape, v, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.values(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push("exp", &shape, v, Op::Exp(x), &[x])
    }

    pub fn softmax_lastaxis(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap();
        let mut out = self.values(x).to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        self.push("softmax_lastaxis", &shape, out, Op::SoftmaxLast { x, width }, &[x])
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values(x).iter().sum();
        self.push("reduce_sum", &[1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let vals = self.values(x);
        let s = vals.iter().sum::<f64>() / vals.len() as f64;
        self.push("reduce_mean", &[1], vec![s], Op::MeanAll(x), &[x])
    }

    /// Numpy-style broadcast: dimensions are aligned from the right and each
    /// source dimension must equal the target or be 1.
    pub fn broadcast_to(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if src.len() > target.len() {
            return Err(shape_err("broadcast_to", &src, target));
        }
        let offset = target.len() - src.len();
        let mut src_strides = vec![0usize; target.len()];
        let mut stride = 1;
        for i in (0..src.len()).rev() {
            let t = target[offset + i];
            if src[i] == t {
                src_strides[offset + i] = stride;
            } else if src[i] != 1 {
                return Err(shape_err("broadcast_to", &src, target));
            }
            stride *= src[i];
        }
        let total: usize = target.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; target.len()];
        let mut pos = 0usize;
        for _ in 0..total {
            map.push(pos);
            for d in (0..target.len()).rev() {
                idx[d] += 1;
                pos += src_strides[d];
                if idx[d] < target[d] {
                    break;
                }
                pos -= src_strides[d] * target[d];
                idx[d] = 0;
            }
        }
        let vals = self.values(x);
        let out = map.iter().map(|&i| vals[i]).collect();
        self.push("broadcast_to", target, out, Op::BroadcastTo { x, map }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let v = self.values(x).to_vec();
        self.push("reshape", shape, v, Op::Reshape(x), &[x])
    }

    pub fn concat_axis(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_axis", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat_axis", format!("axis {axis} out of range for {base:?}")));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat_axis", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.values(v)[o * block..(o + 1) * block]);
            }
        }
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push("concat_axis", &out_shape, out, op, inputs)
    }

    /// Mean softmax cross-entropy of `batch×classes` logits.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy_with_logits", s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = self.values(logits).to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy_with_logits", &[1], vec![loss], op, &[logits])
    }

    /// Populates the gradient of every differentiable node with respect to
    /// the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(
                "backprop",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        self.nodes[loss.0].value.grad_mut()[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            backprop_node(before, node);
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient buffer of an input node, if that input is differentiable.
fn target(before: &mut [Node], v: Var) -> Option<&mut [f64]> {
    let n = &mut before[v.0];
    n.requires_grad.then(|| n.value.grad_mut())
}

fn backprop_node(before: &mut [Node], node: &Node) {
    let g = node.value.grad();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(t) = target(before, v) {
                    t.iter_mut().zip(g).for_each(|(t, g)| *t += sign * g);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(t) = target(before, v) {
                    t.iter_mut().zip(g).for_each(|(t, g)| *t += sign * g);
                }
            }
        }
        Op::Mul(a, b) => {
            let av = before[a.0].value.values().to_vec();
            let bv = before[b.0].value.values().to_vec();
            if let Some(t) = target(before, *a) {
                for ((t, g), y) in t.iter_mut().zip(g).zip(&bv) {
                    *t += g * y;
                }
            }
            if let Some(t) = target(before, *b) {
                for ((t, g), x) in t.iter_mut().zip(g).zip(&av) {
                    *t += g * x;
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(t) = target(before, *a) {
                t.iter_mut().zip(g).for_each(|(t, g)| *t += f * g);
            }
        }
        Op::DivScalar(a, d) => {
            if let Some(t) = target(before, *a) {
                t.iter_mut().zip(g).for_each(|(t, g)| *t += g / d);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if before[a.0].requires_grad {
                let bv = before[b.0].value.values().to_vec();
                let t = before[a.0].value.grad_mut();
                kernels::gemm(m, n, k, g, false, &bv, true, t, true);
            }
            if before[b.0].requires_grad {
                let av = before[a.0].value.values().to_vec();
                let t = before[b.0].value.grad_mut();
                kernels::gemm(k, m, n, &av, true, g, false, t, true);
            }
        }
        Op::Transpose { x, rows, cols } => {
            if let Some(t) = target(before, *x) {
                for i in 0..*rows {
                    for j in 0..*cols {
                        t[i * cols + j] += g[j * rows + i];
                    }
                }
            }
        }
        Op::Conv2d { x, w, geom, cols } => {
            let kernel = before[w.0].value.values().to_vec();
            let mut grad_kernel = before[w.0].requires_grad.then(|| vec![0.0; kernel.len()]);
            let mut grad_input = before[x.0].requires_grad.then(|| vec![0.0; before[x.0].value.len()]);
            kernels::conv2d_backward(
                geom,
                &kernel,
                cols,
                g,
                grad_kernel.as_deref_mut(),
                grad_input.as_deref_mut(),
            );
            for (v, grad) in [(*w, grad_kernel), (*x, grad_input)] {
                if let (Some(t), Some(grad)) = (target(before, v), grad) {
                    t.iter_mut().zip(&grad).for_each(|(t, g)| *t += g);
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(t) = target(before, *x) {
                for (&i, g) in argmax.iter().zip(g) {
                    t[i] += g;
                }
            }
        }
        Op::Relu(x) => {
            let xv = before[x.0].value.values().to_vec();
            if let Some(t) = target(before, *x) {
                for ((t, g), x) in t.iter_mut().zip(g).zip(&xv) {
                    if *x > 0.0 {
                        *t += g;
                    }
                }
            }
        }
        Op::Log(x) => {
            let xv = before[x.0].value.values().to_vec();
            if let Some(t) = target(before, *x) {
                for ((t, g), x) in t.iter_mut().zip(g).zip(&xv) {
                    *t += g / x;
                }
            }
        }
        Op::Exp(x) => {
            if let Some(t) = target(before, *x) {
                for ((t, g), y) in t.iter_mut().zip(g).zip(node.value.values()) {
                    *t += g * y;
                }
            }
        }
        Op::SoftmaxLast { x, width } => {
            if let Some(t) = target(before, *x) {
                let y = node.value.values();
                for ((t, g), y) in t.chunks_mut(*width).zip(g.chunks(*width)).zip(y.chunks(*width)) {
                    let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    for ((t, g), y) in t.iter_mut().zip(g).zip(y) {
                        *t += y * (g - dot);
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(t) = target(before, *x) {
                t.iter_mut().for_each(|t| *t += g[0]);
            }
        }
        Op::MeanAll(x) => {
            if let Some(t) = target(before, *x) {
                let s = g[0] / t.len() as f64;
                t.iter_mut().for_each(|t| *t += s);
            }
        }
        Op::BroadcastTo { x, map } => {
            if let Some(t) = target(before, *x) {
                for (&i, g) in map.iter().zip(g) {
                    t[i] += g;
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(t) = target(before, *x) {
                t.iter_mut().zip(g).for_each(|(t, g)| *t += g);
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let row = shape[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let block = before[v.0].value.shape()[*axis] * inner;
                if let Some(t) = target(before, v) {
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + block];
                        t[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(t, g)| *t += g);
                    }
                }
                offset += block;
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            if let Some(t) = target(before, *logits) {
                let classes = probs.len() / labels.len();
                let s = g[0] / labels.len() as f64;
                for (b, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        t[b * classes + c] += s * (probs[b * classes + c] - onehot);
                    }
                }
            }
        }
    }
}
