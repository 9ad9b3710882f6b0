use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::gemm::{gemm, Layout};
use crate::ops::{permute_data, sigmoid, ConvGeometry};
use crate::shape::{broadcast_strides, for_each_broadcast, numel, split_at_axis};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Exp,
    Ln,
    Sqrt,
    Sqr,
    Abs,
    Sigmoid,
    Silu,
    Tanh,
    Softplus,
    Relu,
}

/// A recorded operation: its inputs plus whatever the adjoint needs.
pub(crate) enum Op {
    Binary(BinaryKind, Tensor, Tensor),
    Scale(Tensor, f64),
    /// input, forward output
    Unary(UnaryKind, Tensor, Arc<Vec<f64>>),
    SumAll(Tensor),
    SumAxis(Tensor, usize),
    Softmax(Tensor, Arc<Vec<f64>>),
    /// input, softmax probabilities
    LogSoftmax(Tensor, Vec<f64>),
    Matmul(Tensor, Tensor),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    Narrow(Tensor, usize, usize),
    Concat(Vec<Tensor>, usize),
    Gather(Tensor, Vec<usize>),
    Conv2d {
        input: Tensor,
        weight: Tensor,
        cols: Vec<f64>,
        geo: ConvGeometry,
    },
    AvgPool(Tensor, usize),
    Upsample(Tensor, usize),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Binary(_, a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Conv2d { input, weight, .. } => vec![input, weight],
            Op::Concat(ts, _) => ts.iter().collect(),
            Op::Scale(a, _)
            | Op::Unary(_, a, _)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Narrow(a, _, _)
            | Op::Gather(a, _)
            | Op::AvgPool(a, _)
            | Op::Upsample(a, _) => vec![a],
        }
    }
}

/// Gradients of a scalar with respect to every tracked leaf it depends on.
#[derive(Default)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient for `leaf`, or `None` when the scalar does not depend on it
    /// through any tracked path.
    pub fn get(&self, leaf: &Tensor) -> Option<&[f64]> {
        self.leaves.get(&leaf.id()).map(Vec::as_slice)
    }

    pub fn get_id(&self, id: usize) -> Option<&[f64]> {
        self.leaves.get(&id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn accumulate(store: &mut HashMap<usize, Vec<f64>>, t: &Tensor, grad: Vec<f64>) {
    if !t.requires_grad() {
        return;
    }
    match store.get_mut(&t.id()) {
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(&grad) {
                *a += g;
            }
        }
        None => {
            store.insert(t.id(), grad);
        }
    }
}

impl Tensor {
    /// Reverse-mode sweep from this scalar.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward(self.shape().to_vec()));
        }
        let mut out = Gradients::default();
        if !self.requires_grad() {
            return Ok(out);
        }
        let order = topo_order(self);
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    out.leaves.insert(node.id(), g);
                }
                Some(op) => propagate(op, node, &g, &mut grads),
            }
        }
        Ok(out)
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // iterative post-order DFS; graphs can be deep
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = &t.0.op {
            for inp in op.inputs() {
                if inp.requires_grad() && !visited.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }
    order
}

fn propagate(op: &Op, out: &Tensor, g: &[f64], grads: &mut HashMap<usize, Vec<f64>>) {
    match op {
        Op::Binary(kind, a, b) => binary_backward(*kind, a, b, out.shape(), g, grads),
        Op::Scale(a, s) => accumulate(grads, a, g.iter().map(|v| v * s).collect()),
        Op::Unary(kind, a, y) => {
            let x = a.data();
            let d: Vec<f64> = (0..g.len())
                .map(|i| {
                    let (xi, yi) = (x[i], y[i]);
                    let local = match kind {
                        UnaryKind::Exp => yi,
                        UnaryKind::Ln => 1.0 / xi,
                        UnaryKind::Sqrt => 0.5 / yi,
                        UnaryKind::Sqr => 2.0 * xi,
                        UnaryKind::Abs => {
                            if xi > 0.0 {
                                1.0
                            } else if xi < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Sigmoid => yi * (1.0 - yi),
                        UnaryKind::Silu => {
                            let s = sigmoid(xi);
                            s * (1.0 + xi * (1.0 - s))
                        }
                        UnaryKind::Tanh => 1.0 - yi * yi,
                        UnaryKind::Softplus => sigmoid(xi),
                        UnaryKind::Relu => {
                            if xi > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    g[i] * local
                })
                .collect();
            accumulate(grads, a, d);
        }
        Op::SumAll(a) => accumulate(grads, a, vec![g[0]; a.numel()]),
        Op::SumAxis(a, axis) => {
            let (outer, len, inner) = split_at_axis(a.shape(), *axis);
            let mut d = vec![0.0; a.numel()];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for l in 0..len {
                    d[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                }
            }
            accumulate(grads, a, d);
        }
        Op::Softmax(a, y) => {
            let cols = *a.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; g.len()];
            for r in 0..g.len() / cols {
                let range = r * cols..(r + 1) * cols;
                let dot: f64 = g[range.clone()].iter().zip(&y[range.clone()]).map(|(a, b)| a * b).sum();
                for i in range {
                    d[i] = y[i] * (g[i] - dot);
                }
            }
            accumulate(grads, a, d);
        }
        Op::LogSoftmax(a, p) => {
            let cols = *a.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; g.len()];
            for r in 0..g.len() / cols {
                let range = r * cols..(r + 1) * cols;
                let total: f64 = g[range.clone()].iter().sum();
                for i in range {
                    d[i] = g[i] - p[i] * total;
                }
            }
            accumulate(grads, a, d);
        }
        Op::Matmul(a, b) => matmul_backward(a, b, g, grads),
        Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
        Op::Permute(a, perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            accumulate(grads, a, permute_data(g, out.shape(), &inverse));
        }
        Op::Narrow(a, axis, start) => {
            let (outer, full, inner) = split_at_axis(a.shape(), *axis);
            let len = out.dim(*axis);
            let mut d = vec![0.0; a.numel()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, a, d);
        }
        Op::Concat(ts, axis) => {
            let (outer, total, inner) = split_at_axis(out.shape(), *axis);
            let mut offset = 0;
            for t in ts {
                let len = t.dim(*axis);
                if t.requires_grad() {
                    let mut d = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        d.extend_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(grads, t, d);
                }
                offset += len;
            }
        }
        Op::Gather(a, idx) => {
            let mut d = vec![0.0; a.numel()];
            for (gi, &i) in g.iter().zip(idx) {
                d[i] += gi;
            }
            accumulate(grads, a, d);
        }
        Op::Conv2d {
            input,
            weight,
            cols,
            geo,
        } => conv_backward(input, weight, cols, geo, g, grads),
        Op::AvgPool(a, k) => {
            let r = a.rank();
            let (h, w) = (a.dim(r - 2), a.dim(r - 1));
            let (ho, wo) = (h / k, w / k);
            let planes = numel(&a.shape()[..r - 2]);
            let inv = 1.0 / (k * k) as f64;
            let mut d = vec![0.0; a.numel()];
            for p in 0..planes {
                for y in 0..h {
                    for x in 0..w {
                        d[(p * h + y) * w + x] = g[(p * ho + y / k) * wo + x / k] * inv;
                    }
                }
            }
            accumulate(grads, a, d);
        }
        Op::Upsample(a, k) => {
            let r = a.rank();
            let (h, w) = (a.dim(r - 2), a.dim(r - 1));
            let (ho, wo) = (h * k, w * k);
            let planes = numel(&a.shape()[..r - 2]);
            let mut d = vec![0.0; a.numel()];
            for p in 0..planes {
                for y in 0..ho {
                    for x in 0..wo {
                        d[(p * h + y / k) * w + x / k] += g[(p * ho + y) * wo + x];
                    }
                }
            }
            accumulate(grads, a, d);
        }
    }
}

fn binary_backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    g: &[f64],
    grads: &mut HashMap<usize, Vec<f64>>,
) {
    let (ad, bd) = (a.data(), b.data());
    let mut da = a.requires_grad().then(|| vec![0.0; a.numel()]);
    let mut db = b.requires_grad().then(|| vec![0.0; b.numel()]);
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
        let go = g[o];
        let (ga, gb) = match kind {
            BinaryKind::Add => (go, go),
            BinaryKind::Sub => (go, -go),
            BinaryKind::Mul => (go * bd[ib], go * ad[ia]),
            BinaryKind::Div => (go / bd[ib], -go * ad[ia] / (bd[ib] * bd[ib])),
        };
        if let Some(d) = da.as_mut() {
            d[ia] += ga;
        }
        if let Some(d) = db.as_mut() {
            d[ib] += gb;
        }
    });
    if let Some(d) = da {
        accumulate(grads, a, d);
    }
    if let Some(d) = db {
        accumulate(grads, b, d);
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64], grads: &mut HashMap<usize, Vec<f64>>) {
    let (m, k) = (a.dim(a.rank() - 2), a.dim(a.rank() - 1));
    let n = b.dim(b.rank() - 1);
    let batch = numel(&a.shape()[..a.rank() - 2]);
    let shared = b.rank() == 2;
    if a.requires_grad() {
        // dA = dC · Bᵀ
        let mut d = vec![0.0; a.numel()];
        for bi in 0..batch {
            let bm = if shared { b.data() } else { &b.data()[bi * k * n..(bi + 1) * k * n] };
            gemm(
                m,
                n,
                k,
                1.0,
                &g[bi * m * n..(bi + 1) * m * n],
                Layout::row_major(n),
                bm,
                Layout::transposed(n),
                0.0,
                &mut d[bi * m * k..(bi + 1) * m * k],
            );
        }
        accumulate(grads, a, d);
    }
    if b.requires_grad() {
        // dB = Aᵀ · dC, summed over the batch when B is shared
        let mut d = vec![0.0; b.numel()];
        if shared {
            gemm(
                k,
                batch * m,
                n,
                1.0,
                a.data(),
                Layout::transposed(k),
                g,
                Layout::row_major(n),
                0.0,
                &mut d,
            );
        } else {
            for bi in 0..batch {
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    Layout::transposed(k),
                    &g[bi * m * n..(bi + 1) * m * n],
                    Layout::row_major(n),
                    0.0,
                    &mut d[bi * k * n..(bi + 1) * k * n],
                );
            }
        }
        accumulate(grads, b, d);
    }
}

fn conv_backward(
    input: &Tensor,
    weight: &Tensor,
    cols: &[f64],
    geo: &ConvGeometry,
    g: &[f64],
    grads: &mut HashMap<usize, Vec<f64>>,
) {
    let (o, ckk, hw) = (geo.o, geo.ckk(), geo.ho * geo.wo);
    if weight.requires_grad() {
        let mut dw = vec![0.0; weight.numel()];
        for b in 0..geo.n {
            gemm(
                o,
                hw,
                ckk,
                1.0,
                &g[b * o * hw..(b + 1) * o * hw],
                Layout::row_major(hw),
                &cols[b * ckk * hw..(b + 1) * ckk * hw],
                Layout::transposed(hw),
                1.0,
                &mut dw,
            );
        }
        accumulate(grads, weight, dw);
    }
    if input.requires_grad() {
        let per_in = geo.c * geo.h * geo.w;
        let mut dx = vec![0.0; input.numel()];
        let mut dcol = vec![0.0; ckk * hw];
        for b in 0..geo.n {
            gemm(
                ckk,
                o,
                hw,
                1.0,
                weight.data(),
                Layout::transposed(ckk),
                &g[b * o * hw..(b + 1) * o * hw],
                Layout::row_major(hw),
                0.0,
                &mut dcol,
            );
            geo.col2im(&dcol, &mut dx[b * per_in..(b + 1) * per_in]);
        }
        accumulate(grads, input, dx);
    }
}
