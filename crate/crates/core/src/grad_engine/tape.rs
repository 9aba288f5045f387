//! Reverse-mode tape.
//!
//! Every node stores its forward value. [`Tape::grad`] walks the tape
//! backwards and records the adjoint computation as new nodes on the same
//! tape, so a gradient is itself a differentiable expression. One more call
//! to `grad` on an expression built from gradients gives second-order terms
//! such as the parameter gradient of a gradient-norm penalty.

use std::sync::Arc;

use super::conv::{self, ConvGeom};
use super::{GradError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Square(Var),
    Recip(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Expand(Var),
    MulScalar(Var, Var),
    Norm(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    ChannelSum(Var),
    ChannelExpand(Var),
    Conv(Var, Var, ConvGeom),
    ConvTranspose(Var, Var, ConvGeom),
    ConvWeightGrad(Var, Var, ConvGeom),
    Reshape(Var),
    SoftmaxXent(Var, Arc<[usize]>),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MulScalar(a, b) | MatMul(a, b) | AddBias(a, b) => {
                [Some(a), Some(b)]
            }
            Conv(a, b, _) | ConvTranspose(a, b, _) | ConvWeightGrad(a, b, _) => [Some(a), Some(b)],
            Scale(a, _) | Shift(a) | Square(a) | Recip(a) | Tanh(a) | Sigmoid(a) | LeakyRelu(a, _) => {
                [Some(a), None]
            }
            Sum(a) | Expand(a) | Norm(a) | Transpose(a) | ChannelSum(a) | ChannelExpand(a) | Reshape(a) => {
                [Some(a), None]
            }
            SoftmaxXent(a, _) => [Some(a), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Norms below this are treated as zero; the subgradient there is 0.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Shift(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = Tensor::full(shape, self.value(a).item());
        self.push(v, Op::Expand(a))
    }

    /// Tensor `a` times the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let c = self.value(s).item();
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulScalar(a, s))
    }

    /// Euclidean norm of all entries, as a `[1]` tensor.
    pub fn norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).norm());
        self.push(v, Op::Norm(a))
    }

    /// `[n, k] x [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        debug_assert_eq!(vb.shape()[0], k);
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..][..m];
            for (p, &x) in da[i * k..][..k].iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(&db[p * m..][..m]) {
                    *o += x * w;
                }
            }
        }
        let v = Tensor::new(vec![n, m], out).expect("matmul shape");
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let d = va.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], out).expect("transpose shape");
        self.push(v, Op::Transpose(a))
    }

    /// Adds a per-channel bias `[c]` along axis 1 of `x: [n, c, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        let (c, inner) = channel_layout(v.shape());
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            *val += bias[(i / inner) % c];
        }
        self.push(v, Op::AddBias(x, b))
    }

    /// Sums `[n, c, ...]` down to `[c]`.
    pub fn channel_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (c, inner) = channel_layout(va.shape());
        let mut out = vec![0.0; c];
        for (i, &val) in va.data().iter().enumerate() {
            out[(i / inner) % c] += val;
        }
        self.push(Tensor::from_vec(out), Op::ChannelSum(a))
    }

    /// Broadcasts `[c]` to `shape = [n, c, ...]`.
    pub fn channel_expand(&mut self, a: Var, shape: &[usize]) -> Var {
        let (c, inner) = channel_layout(shape);
        let src = self.value(a).data();
        let len: usize = shape.iter().product();
        let out: Vec<f64> = (0..len).map(|i| src[(i / inner) % c]).collect();
        let v = Tensor::new(shape.to_vec(), out).expect("channel_expand shape");
        self.push(v, Op::ChannelExpand(a))
    }

    /// Strided convolution of `x: [n, ci, H, W]` with `w: [co, ci, k, k]`.
    pub fn conv(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, ci, co) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
        let out = conv::conv_forward(vx.data(), vw.data(), n, ci, co, &geom);
        let v = Tensor::new(vec![n, co, geom.out_h, geom.out_w], out).expect("conv shape");
        self.push(v, Op::Conv(x, w, geom))
    }

    /// Transposed convolution of `y: [n, co, h, w]` with `w: [co, ci, k, k]`.
    pub fn conv_transpose(&mut self, y: Var, w: Var, geom: ConvGeom) -> Var {
        let (vy, vw) = (self.value(y), self.value(w));
        let (n, co, ci) = (vy.shape()[0], vw.shape()[0], vw.shape()[1]);
        let out = conv::conv_input_grad(vy.data(), vw.data(), n, ci, co, &geom);
        let v = Tensor::new(vec![n, ci, geom.in_h, geom.in_w], out).expect("conv_transpose shape");
        self.push(v, Op::ConvTranspose(y, w, geom))
    }

    /// Weight-shaped correlation of `x: [n, ci, H, W]` and `y: [n, co, h, w]`.
    pub fn conv_weight_grad(&mut self, x: Var, y: Var, geom: ConvGeom) -> Var {
        let (vx, vy) = (self.value(x), self.value(y));
        let (n, ci, co) = (vx.shape()[0], vx.shape()[1], vy.shape()[1]);
        let out = conv::conv_weight_grad(vx.data(), vy.data(), n, ci, co, &geom);
        let k = geom.kernel;
        let v = Tensor::new(vec![co, ci, k, k], out).expect("conv_weight_grad shape");
        self.push(v, Op::ConvWeightGrad(x, y, geom))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Mean softmax cross-entropy of `logits: [n, classes]` against labels.
    ///
    /// First-order only: the recorded backward treats the softmax
    /// probabilities as constants.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let v = self.value(logits);
        let (n, m) = (v.shape()[0], v.shape()[1]);
        debug_assert_eq!(labels.len(), n);
        let mut total = 0.0;
        for (row, &label) in v.data().chunks(m).zip(labels) {
            total += log_sum_exp(row) - row[label];
        }
        let out = Tensor::scalar(total / n as f64);
        self.push(out, Op::SoftmaxXent(logits, labels.into()))
    }

    /// Gradient of the one-element node `output` with respect to each of
    /// `wrt`, recorded on this tape. Inputs that `output` does not depend on
    /// get a zero tensor.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, GradError> {
        if !self.value(output).is_scalar() {
            return Err(GradError::NonScalarOutput(self.shape(output).to_vec()));
        }
        let end = output.0 + 1;
        let mut reaches = vec![false; end];
        for w in wrt {
            if w.0 < end {
                reaches[w.0] = true;
            }
        }
        for i in 0..end {
            if !reaches[i] {
                reaches[i] = self.nodes[i].op.inputs().iter().flatten().any(|v| reaches[v.0]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if reaches[output.0] {
            let seed = Tensor::full(self.shape(output), 1.0);
            adjoint[output.0] = Some(self.leaf(seed));
        }
        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !reaches[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.backward(Var(i), &op, g, &reaches) {
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(prev) => self.add(prev, contrib),
                    None => contrib,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.shape(*w));
                    self.leaf(zeros)
                }
            })
            .collect())
    }

    fn backward(&mut self, node: Var, op: &Op, g: Var, reaches: &[bool]) -> Vec<(Var, Var)> {
        let need = |v: Var| reaches[v.0];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, self.scale(g, -1.0)));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    out.push((a, self.mul(g, b)));
                }
                if need(b) {
                    out.push((b, self.mul(g, a)));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(g, c))),
            Op::Shift(a) => out.push((a, g)),
            Op::Square(a) => {
                let two_a = self.scale(a, 2.0);
                out.push((a, self.mul(g, two_a)));
            }
            Op::Recip(a) => {
                let y2 = self.square(node);
                let d = self.scale(y2, -1.0);
                out.push((a, self.mul(g, d)));
            }
            Op::Tanh(a) => {
                let y2 = self.square(node);
                let neg = self.scale(y2, -1.0);
                let d = self.shift(neg, 1.0);
                out.push((a, self.mul(g, d)));
            }
            Op::Sigmoid(a) => {
                let neg = self.scale(node, -1.0);
                let one_minus = self.shift(neg, 1.0);
                let d = self.mul(node, one_minus);
                out.push((a, self.mul(g, d)));
            }
            Op::LeakyRelu(a, slope) => {
                // Piecewise linear: the mask is a constant of the backward graph.
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
                let m = self.leaf(mask);
                out.push((a, self.mul(g, m)));
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.expand(g, &shape)));
            }
            Op::Expand(a) => out.push((a, self.sum(g))),
            Op::MulScalar(a, s) => {
                if need(a) {
                    out.push((a, self.mul_scalar(g, s)));
                }
                if need(s) {
                    let prod = self.mul(g, a);
                    out.push((s, self.sum(prod)));
                }
            }
            Op::Norm(a) => {
                if self.value(node).item() >= NORM_FLOOR {
                    let inv = self.recip(node);
                    let coef = self.mul(g, inv);
                    out.push((a, self.mul_scalar(a, coef)));
                }
            }
            Op::MatMul(a, b) => {
                if need(a) {
                    let bt = self.transpose(b);
                    out.push((a, self.matmul(g, bt)));
                }
                if need(b) {
                    let at = self.transpose(a);
                    out.push((b, self.matmul(at, g)));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose(g))),
            Op::AddBias(x, b) => {
                if need(x) {
                    out.push((x, g));
                }
                if need(b) {
                    out.push((b, self.channel_sum(g)));
                }
            }
            Op::ChannelSum(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.channel_expand(g, &shape)));
            }
            Op::ChannelExpand(a) => out.push((a, self.channel_sum(g))),
            Op::Conv(x, w, geom) => {
                if need(x) {
                    out.push((x, self.conv_transpose(g, w, geom)));
                }
                if need(w) {
                    out.push((w, self.conv_weight_grad(x, g, geom)));
                }
            }
            Op::ConvTranspose(y, w, geom) => {
                if need(y) {
                    out.push((y, self.conv(g, w, geom)));
                }
                if need(w) {
                    out.push((w, self.conv_weight_grad(g, y, geom)));
                }
            }
            Op::ConvWeightGrad(x, y, geom) => {
                if need(x) {
                    out.push((x, self.conv_transpose(y, g, geom)));
                }
                if need(y) {
                    out.push((y, self.conv(x, g, geom)));
                }
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                let r = self.reshape(g, &shape).expect("reshape adjoint");
                out.push((a, r));
            }
            Op::SoftmaxXent(a, ref labels) => {
                let v = self.value(a);
                let (n, m) = (v.shape()[0], v.shape()[1]);
                let mut d = Vec::with_capacity(n * m);
                for (row, &label) in v.data().chunks(m).zip(labels.iter()) {
                    let lse = log_sum_exp(row);
                    for (j, &z) in row.iter().enumerate() {
                        let p = (z - lse).exp();
                        d.push((p - if j == label { 1.0 } else { 0.0 }) / n as f64);
                    }
                }
                let dl = self.leaf(Tensor::new(vec![n, m], d).expect("xent shape"));
                out.push((a, self.mul_scalar(dl, g)));
            }
        }
        out
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize) {
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    (c, inner)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}
