//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! context to compute its vector-Jacobian product. `backward` walks the
//! nodes in exact reverse order of recording. A tape is single-owner; one
//! training step uses one tape.

use crate::error::{Error, Result};
use crate::fft;
use crate::metrics;
use crate::ops::{self, ConvDims, GatherDims, MatmulDims, Padding};
use crate::tensor::{Indices, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ScaleChannels(Var, Var),
    AddChannels(Var, Var),
    MatMul(Var, Var, MatmulDims),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Gather(Var, Indices, GatherDims),
    WindowPartition(Var, usize),
    WindowReverse(Var, usize),
    SliceLast(Var, usize),
    ConcatLast(Vec<Var>),
    Conv2d(Var, Var, ConvDims),
    Gelu(Var),
    Upsample2x(Var),
    MeanAxis(Var, usize),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Clamp(Var, f32, f32),
    SpectralFilter(Var, Vec<f32>),
    /// Scalar whose gradient with respect to its input was computed
    /// alongside the value.
    ScalarWithGrad(Var, Tensor),
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

/// Accumulated gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Node indices in the order their vector-Jacobian products ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn add_into(acc: &mut Option<Tensor>, g: Tensor) {
    match acc {
        Some(a) => a
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    fn check_channel_vec(&self, x: Var, g: Var, op: &'static str) -> Result<usize> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(g) != [c] {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(g).to_vec(),
            });
        }
        Ok(c)
    }

    /// `x[.., c] * gain[c]`.
    pub fn scale_channels(&mut self, x: Var, gain: Var) -> Result<Var> {
        let c = self.check_channel_vec(x, gain, "scale_channels")?;
        let g = self.value(gain).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(g).for_each(|(v, &s)| *v *= s);
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(v, Op::ScaleChannels(x, gain), &[x, gain]))
    }

    /// `x[.., c] + bias[c]`.
    pub fn add_channels(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.check_channel_vec(x, bias, "add_channels")?;
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(v, &s)| *v += s);
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(v, Op::AddChannels(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dims, _) = ops::matmul_dims(self.shape(a), self.shape(b))?;
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b, dims), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = ops::transpose_last(self.value(x))?;
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = ops::softmax_lastdim(self.value(x))?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    /// Row gather; the indices are constants of the tape.
    pub fn gather_rows(&mut self, src: Var, idx: &Indices) -> Result<Var> {
        let (dims, _) = ops::gather_dims(self.shape(src), idx)?;
        let v = ops::gather_rows(self.value(src), idx)?;
        Ok(self.push(v, Op::Gather(src, idx.clone(), dims), &[src]))
    }

    pub fn window_partition(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = ops::window_partition(self.value(x), n)?;
        Ok(self.push(v, Op::WindowPartition(x, n), &[x]))
    }

    pub fn window_reverse(&mut self, x: Var, n: usize, side: usize) -> Result<Var> {
        let v = ops::window_reverse(self.value(x), n, side)?;
        Ok(self.push(v, Op::WindowReverse(x, n), &[x]))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = ops::slice_last(self.value(x), start, len)?;
        Ok(self.push(v, Op::SliceLast(x, start), &[x]))
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
        let v = ops::concat_last(&vals)?;
        Ok(self.push(v, Op::ConcatLast(xs.to_vec()), xs))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let dims = ops::conv_dims(self.shape(x), self.shape(w), stride, padding)?;
        let out = ops::conv2d_raw(self.value(x).data(), self.value(w).data(), &dims);
        let v = Tensor::from_parts(vec![dims.ho, dims.wo, dims.cout], out);
        Ok(self.push(v, Op::Conv2d(x, w, dims), &[x, w]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let v = ops::upsample_nearest2x(self.value(x))?;
        Ok(self.push(v, Op::Upsample2x(x), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::mean_axis(self.value(x), axis)?;
        Ok(self.push(v, Op::MeanAxis(x, axis), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum() as f32);
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar((t.sum() / t.numel() as f64) as f32);
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f32::abs);
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let v = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(v, Op::Clamp(x, lo, hi), &[x])
    }

    /// Per-channel spectral masking of `[H, W, C]`: `irfft2(rfft2(x) · mask)`.
    /// `mask` covers the half spectrum and must be symmetric under `k -> -k`.
    pub fn spectral_filter(&mut self, x: Var, mask: Vec<f32>) -> Result<Var> {
        let v = fft::filter_channels(self.value(x), &mask)?;
        Ok(self.push(v, Op::SpectralFilter(x, mask), &[x]))
    }

    /// Mean magnitude of the half spectrum of every channel of `[H, W, C]`.
    pub fn spectral_l1(&mut self, x: Var) -> Result<Var> {
        let (val, grad) = fft::spectral_l1_with_grad(self.value(x))?;
        Ok(self.push(Tensor::scalar(val), Op::ScalarWithGrad(x, grad), &[x]))
    }

    /// SSIM of `x` against a constant target, differentiable in `x`.
    pub fn ssim(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let (val, grad) = metrics::ssim_with_grad(self.value(x), target)?;
        Ok(self.push(Tensor::scalar(val as f32), Op::ScalarWithGrad(x, grad), &[x]))
    }

    /// Reverse sweep from a scalar `root`. Only leaves keep their gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), 1.0));
        let mut visited = Vec::new();
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.vjp(node, g, &mut grads)?;
        }
        Ok(Gradients { grads, visited })
    }

    fn vjp(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if wants(v) {
                add_into(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*b, g.clone(), grads);
                send(*a, g, grads);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|v| -v), grads);
                send(*a, g, grads);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y)?, grads);
                }
                if wants(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y)?, grads);
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|v| v * s), grads),
            Op::ScaleChannels(x, gain) => {
                let gv = self.value(*gain).data();
                let c = gv.len();
                if wants(*x) {
                    let mut gx = g.data().to_vec();
                    for row in gx.chunks_mut(c) {
                        row.iter_mut().zip(gv).for_each(|(v, &s)| *v *= s);
                    }
                    send(*x, Tensor::from_parts(g.shape().to_vec(), gx), grads);
                }
                if wants(*gain) {
                    let mut gg = vec![0.0f32; c];
                    for (grow, xrow) in g.data().chunks(c).zip(self.value(*x).data().chunks(c)) {
                        for ((acc, &a), &b) in gg.iter_mut().zip(grow).zip(xrow) {
                            *acc += a * b;
                        }
                    }
                    send(*gain, Tensor::from_parts(vec![c], gg), grads);
                }
            }
            Op::AddChannels(x, bias) => {
                if wants(*bias) {
                    let c = self.value(*bias).numel();
                    let mut gb = vec![0.0f32; c];
                    for row in g.data().chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    send(*bias, Tensor::from_parts(vec![c], gb), grads);
                }
                send(*x, g, grads);
            }
            Op::MatMul(a, b, d) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, p, n) = (d.m, d.p, d.n);
                if wants(*a) {
                    let mut ga = vec![0.0f32; av.numel()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * m * p } else { 0 };
                        let bo = if d.b_batched { bi * p * n } else { 0 };
                        ops::gemm_nt_acc(
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &bv.data()[bo..bo + p * n],
                            &mut ga[ao..ao + m * p],
                            m,
                            n,
                            p,
                        );
                    }
                    send(*a, Tensor::from_parts(av.shape().to_vec(), ga), grads);
                }
                if wants(*b) {
                    let mut gb = vec![0.0f32; bv.numel()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * m * p } else { 0 };
                        let bo = if d.b_batched { bi * p * n } else { 0 };
                        ops::gemm_tn_acc(
                            &av.data()[ao..ao + m * p],
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + p * n],
                            m,
                            p,
                            n,
                        );
                    }
                    send(*b, Tensor::from_parts(bv.shape().to_vec(), gb), grads);
                }
            }
            Op::Transpose(x) => send(*x, ops::transpose_last(&g)?, grads),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                send(*x, Tensor::from_parts(shape, g.into_data()), grads);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut gx = g.into_data();
                for (grow, yrow) in gx.chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                send(*x, Tensor::from_parts(y.shape().to_vec(), gx), grads);
            }
            Op::Gather(src, idx, d) => {
                let sv = self.value(*src);
                let mut gs = vec![0.0f32; sv.numel()];
                for b in 0..d.batch {
                    let base = if d.src_batched { b * d.rows * d.cols } else { 0 };
                    for (j, &r) in idx.data()[b * d.k..(b + 1) * d.k].iter().enumerate() {
                        let grow = &g.data()[(b * d.k + j) * d.cols..(b * d.k + j + 1) * d.cols];
                        let dst = &mut gs[base + r * d.cols..base + (r + 1) * d.cols];
                        dst.iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                    }
                }
                send(*src, Tensor::from_parts(sv.shape().to_vec(), gs), grads);
            }
            Op::WindowPartition(x, n) => {
                let side = self.shape(*x)[0];
                send(*x, ops::window_reverse(&g, *n, side)?, grads);
            }
            Op::WindowReverse(x, n) => send(*x, ops::window_partition(&g, *n)?, grads),
            Op::SliceLast(x, start) => {
                let xs = self.shape(*x);
                let c = *xs.last().unwrap();
                let len = *g.shape().last().unwrap();
                let mut gx = vec![0.0f32; self.value(*x).numel()];
                for (dst, src) in gx.chunks_mut(c).zip(g.data().chunks(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                send(*x, Tensor::from_parts(xs.to_vec(), gx), grads);
            }
            Op::ConcatLast(xs) => {
                let mut start = 0;
                for &x in xs {
                    let len = *self.shape(x).last().unwrap();
                    if wants(x) {
                        send(x, ops::slice_last(&g, start, len)?, grads);
                    }
                    start += len;
                }
            }
            Op::Conv2d(x, w, d) => {
                if wants(*w) {
                    let gw = ops::conv2d_grad_weight(self.value(*x).data(), g.data(), d);
                    send(*w, Tensor::from_parts(self.shape(*w).to_vec(), gw), grads);
                }
                if wants(*x) {
                    let gx = ops::conv2d_grad_input(g.data(), self.value(*w).data(), d);
                    send(*x, Tensor::from_parts(self.shape(*x).to_vec(), gx), grads);
                }
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * ops::gelu_grad(xv))?;
                send(*x, gx, grads);
            }
            Op::Upsample2x(x) => {
                let (h, w, c) = self.value(*x).hwc()?;
                let mut gx = vec![0.0f32; h * w * c];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let src = (y * 2 * w + xx) * c;
                        let dst = ((y / 2) * w + xx / 2) * c;
                        for k in 0..c {
                            gx[dst + k] += g.data()[src + k];
                        }
                    }
                }
                send(*x, Tensor::from_parts(vec![h, w, c], gx), grads);
            }
            Op::MeanAxis(x, axis) => {
                let xs = self.shape(*x).to_vec();
                let (outer, len, inner) = ops::axis_split(&xs, *axis)?;
                let inv = 1.0 / len as f32;
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let grow = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(grow.iter().map(|v| v * inv));
                    }
                }
                send(*x, Tensor::from_parts(xs, gx), grads);
            }
            Op::Sum(x) => {
                send(*x, Tensor::full(self.shape(*x).to_vec(), g.item()), grads);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f32;
                send(*x, Tensor::full(self.shape(*x).to_vec(), g.item() / n), grads);
            }
            Op::Abs(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                send(*x, gx, grads);
            }
            Op::Clamp(x, lo, hi) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    if xv >= *lo && xv <= *hi {
                        gv
                    } else {
                        0.0
                    }
                })?;
                send(*x, gx, grads);
            }
            Op::SpectralFilter(x, mask) => send(*x, fft::filter_channels(&g, mask)?, grads),
            Op::ScalarWithGrad(x, local) => {
                let s = g.item();
                send(*x, local.map(|v| v * s), grads);
            }
        }
        Ok(())
    }
}
