use std::sync::Arc;

use crate::backward::{BinaryKind, Op, UnaryKind};
use crate::error::{invalid, Result, TensorError};
use crate::gemm::{gemm, Layout};
use crate::shape::{
    broadcast_shapes, broadcast_strides, check_axis, contiguous_strides, for_each_broadcast, numel,
    split_at_axis,
};
use crate::tensor::Tensor;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn binary(a: &Tensor, b: &Tensor, kind: BinaryKind, op: &'static str) -> Result<Tensor> {
    let f = |x: f64, y: f64| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    };
    let track = a.requires_grad() || b.requires_grad();
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let data = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_op(data, a.shape().to_vec(), track, || {
            Op::Binary(kind, a.clone(), b.clone())
        }));
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let mut data = vec![0.0; numel(&out_shape)];
    if bd.len() == 1 && ad.len() == data.len() {
        let y = bd[0];
        for (o, &x) in data.iter_mut().zip(ad) {
            *o = f(x, y);
        }
    } else {
        fill_broadcast(&mut data, a, b, &out_shape, f);
    }
    Ok(Tensor::from_op(data, out_shape, track, || {
        Op::Binary(kind, a.clone(), b.clone())
    }))
}

fn fill_broadcast(data: &mut [f64], a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) {
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
}

fn unary(a: &Tensor, kind: UnaryKind) -> Tensor {
    let f: fn(f64) -> f64 = match kind {
        UnaryKind::Exp => f64::exp,
        UnaryKind::Ln => f64::ln,
        UnaryKind::Sqrt => f64::sqrt,
        UnaryKind::Sqr => |x| x * x,
        UnaryKind::Abs => f64::abs,
        UnaryKind::Sigmoid => sigmoid,
        UnaryKind::Silu => |x| x * sigmoid(x),
        UnaryKind::Tanh => f64::tanh,
        UnaryKind::Softplus => softplus,
        UnaryKind::Relu => |x| x.max(0.0),
    };
    let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
    let data = Arc::new(data);
    let op = if a.requires_grad() {
        Some(Op::Unary(kind, a.clone(), Arc::clone(&data)))
    } else {
        None
    };
    Tensor::build(data, a.shape().to_vec(), op)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryKind::Div, "div")
    }

    /// `self * scale + shift`, elementwise.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x * scale + shift).collect();
        Tensor::from_op(data, self.shape().to_vec(), self.requires_grad(), || {
            Op::Scale(self.clone(), scale)
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.affine(1.0, s)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, UnaryKind::Exp)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, UnaryKind::Ln)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, UnaryKind::Sqrt)
    }

    pub fn sqr(&self) -> Tensor {
        unary(self, UnaryKind::Sqr)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, UnaryKind::Abs)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, UnaryKind::Sigmoid)
    }

    pub fn silu(&self) -> Tensor {
        unary(self, UnaryKind::Silu)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, UnaryKind::Tanh)
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, UnaryKind::Softplus)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, UnaryKind::Relu)
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![], self.requires_grad(), || Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let src = self.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Ok(Tensor::from_op(data, shape, self.requires_grad(), || {
            Op::SumAxis(self.clone(), axis)
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("mean_axis", self.shape(), axis)?;
        let n = self.shape()[axis].max(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("softmax_last")?;
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let x = &src[r * cols..(r + 1) * cols];
            let y = &mut data[r * cols..(r + 1) * cols];
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - m).exp();
                z += *yi;
            }
            for yi in y.iter_mut() {
                *yi /= z;
            }
        }
        let data = Arc::new(data);
        let op = self
            .requires_grad()
            .then(|| Op::Softmax(self.clone(), Arc::clone(&data)));
        Ok(Tensor::build(data, self.shape().to_vec(), op))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&self) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("log_softmax_last")?;
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        let mut probs = vec![0.0; src.len()];
        for r in 0..rows {
            let x = &src[r * cols..(r + 1) * cols];
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..cols {
                data[r * cols + c] = x[c] - lse;
                probs[r * cols + c] = (x[c] - lse).exp();
            }
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), self.requires_grad(), || {
            Op::LogSoftmax(self.clone(), probs)
        }))
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        let cols = *self
            .shape()
            .last()
            .ok_or_else(|| invalid(op, "scalar input"))?;
        if cols == 0 {
            return Err(invalid(op, "empty last axis"));
        }
        Ok((self.numel() / cols, cols))
    }

    /// Batched matrix product. `self: [.., m, k]`; `rhs` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with the same batch dims.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.dim(self.rank() - 2), self.dim(self.rank() - 1));
        let (k2, n) = (rhs.dim(rhs.rank() - 2), rhs.dim(rhs.rank() - 1));
        if k != k2 {
            return Err(mismatch());
        }
        let batch = numel(&self.shape()[..self.rank() - 2]);
        let shared = rhs.rank() == 2;
        if !shared && rhs.shape()[..rhs.rank() - 2] != self.shape()[..self.rank() - 2] {
            return Err(mismatch());
        }
        let mut out_shape = self.shape()[..self.rank() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut data = vec![0.0; batch * m * n];
        if shared {
            // fold the batch into the row dimension
            gemm(
                batch * m,
                k,
                n,
                1.0,
                self.data(),
                Layout::row_major(k),
                rhs.data(),
                Layout::row_major(n),
                0.0,
                &mut data,
            );
        } else {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &self.data()[bi * m * k..(bi + 1) * m * k],
                    Layout::row_major(k),
                    &rhs.data()[bi * k * n..(bi + 1) * k * n],
                    Layout::row_major(n),
                    0.0,
                    &mut data[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let track = self.requires_grad() || rhs.requires_grad();
        Ok(Tensor::from_op(data, out_shape, track, || {
            Op::Matmul(self.clone(), rhs.clone())
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let op = self.requires_grad().then(|| Op::Reshape(self.clone()));
        Ok(Tensor::build(self.shared_data(), shape.to_vec(), op))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.dim(p)).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        Ok(Tensor::from_op(data, out_shape, self.requires_grad(), || {
            Op::Permute(self.clone(), perm.to_vec())
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        check_axis("transpose", self.shape(), a.max(b))?;
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", self.shape(), axis)?;
        if start + len > self.dim(axis) {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} exceeds extent {}", start + len, self.dim(axis)),
            ));
        }
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(data, shape, self.requires_grad(), || {
            Op::Narrow(self.clone(), axis, start)
        }))
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        check_axis("concat", first.shape(), axis)?;
        for t in tensors {
            let compatible = t.rank() == first.rank()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let total: usize = tensors.iter().map(|t| t.dim(axis)).sum();
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in tensors {
                let len = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let track = tensors.iter().any(Tensor::requires_grad);
        Ok(Tensor::from_op(data, shape, track, || {
            Op::Concat(tensors.to_vec(), axis)
        }))
    }

    /// Picks elements of the flattened tensor; the result is 1-D.
    pub fn gather_flat(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(invalid("gather_flat", format!("index {bad} out of {n}")));
        }
        let src = self.data();
        let data = indices.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(data, vec![indices.len()], self.requires_grad(), || {
            Op::Gather(self.clone(), indices.to_vec())
        }))
    }

    /// 2-D convolution (cross-correlation) of `self: [n, c, h, w]` with
    /// `weight: [o, c, kh, kw]`, zero padding `pad`, stride `stride`.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let geo = ConvGeometry::new(self.shape(), weight.shape(), stride, pad)?;
        let ConvGeometry { n, o, ho, wo, .. } = geo;
        let (ckk, hw) = (geo.ckk(), ho * wo);
        let mut cols = vec![0.0; n * ckk * hw];
        let mut data = vec![0.0; n * o * hw];
        let per_in = geo.c * geo.h * geo.w;
        for b in 0..n {
            let col = &mut cols[b * ckk * hw..(b + 1) * ckk * hw];
            geo.im2col(&self.data()[b * per_in..(b + 1) * per_in], col);
            gemm(
                o,
                ckk,
                hw,
                1.0,
                weight.data(),
                Layout::row_major(ckk),
                col,
                Layout::row_major(hw),
                0.0,
                &mut data[b * o * hw..(b + 1) * o * hw],
            );
        }
        let track = self.requires_grad() || weight.requires_grad();
        Ok(Tensor::from_op(data, vec![n, o, ho, wo], track, || Op::Conv2d {
            input: self.clone(),
            weight: weight.clone(),
            cols,
            geo,
        }))
    }

    /// Non-overlapping `k×k` average pooling over the last two axes.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        let (planes, h, w) = self.planes("avg_pool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(invalid("avg_pool2d", format!("{h}x{w} not divisible by {k}")));
        }
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let src = self.data();
        let mut data = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let out = &mut data[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..h {
                let orow = &mut out[(y / k) * wo..(y / k + 1) * wo];
                for x in 0..w {
                    orow[x / k] += plane[y * w + x] * inv;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Ok(Tensor::from_op(data, shape, self.requires_grad(), || {
            Op::AvgPool(self.clone(), k)
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor over the last two
    /// axes.
    pub fn upsample_nearest2d(&self, k: usize) -> Result<Tensor> {
        let (planes, h, w) = self.planes("upsample_nearest2d")?;
        if k == 0 {
            return Err(invalid("upsample_nearest2d", "factor 0"));
        }
        let (ho, wo) = (h * k, w * k);
        let src = self.data();
        let mut data = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let out = &mut data[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    out[y * wo + x] = plane[(y / k) * w + x / k];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Ok(Tensor::from_op(data, shape, self.requires_grad(), || {
            Op::Upsample(self.clone(), k)
        }))
    }

    pub(crate) fn planes(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.rank() < 2 {
            return Err(invalid(op, format!("need at least 2 axes, got {:?}", self.shape())));
        }
        let r = self.rank();
        let (h, w) = (self.dim(r - 2), self.dim(r - 1));
        Ok((numel(&self.shape()[..r - 2]), h, w))
    }
}

pub(crate) fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = vec![0.0; src.len()];
    if rank == 0 {
        data.copy_from_slice(src);
        return data;
    }
    let zero = vec![0usize; rank];
    // reuse the broadcast odometer with the permuted source strides
    for_each_broadcast(&out_shape, &strides, &zero, |o, i, _| data[o] = src[i]);
    data
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        };
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride 0"));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, kh, kw) = (weight[0], weight[2], weight[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(mismatch());
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Unfolds one image `[c, h, w]` into `[c·kh·kw, ho·wo]`.
    pub fn im2col(&self, img: &[f64], col: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let srow = &img[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: folds columns back, accumulating.
    pub fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut img[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
