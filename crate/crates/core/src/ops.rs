//! Forward kernels on plain tensors. The tape in `autograd` wraps these
//! and adds the matching vector-Jacobian products.

use crate::error::{Error, Result};
use crate::tensor::{Indices, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub p: usize,
    pub n: usize,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    let mismatch = || Error::Dimension {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (lead_a, ma) = a.split_at(a.len() - 2);
    let (lead_b, mb) = b.split_at(b.len() - 2);
    let (m, p) = (ma[0], ma[1]);
    let (p2, n) = (mb[0], mb[1]);
    if p != p2 {
        return Err(mismatch());
    }
    let pa: usize = lead_a.iter().product();
    let pb: usize = lead_b.iter().product();
    let (lead, a_batched, b_batched) = if lead_a == lead_b {
        (lead_a.to_vec(), true, true)
    } else if pb == 1 {
        (lead_a.to_vec(), true, false)
    } else if pa == 1 {
        (lead_b.to_vec(), false, true)
    } else {
        return Err(mismatch());
    };
    let batch = lead.iter().product();
    let mut out = lead;
    out.extend([m, n]);
    Ok((
        MatmulDims {
            batch,
            a_batched,
            b_batched,
            m,
            p,
            n,
        },
        out,
    ))
}

const SMALL_GEMM: usize = 32 * 32 * 32;

/// `c += a · b` where each operand is addressed by (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn sgemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // packing overhead dominates the tiny per-window products
    if m * k * n <= SMALL_GEMM {
        if csb == 1 {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for l in 0..k {
                    let av = a[i * rsa + l * csa];
                    for (cv, &bv) in crow.iter_mut().zip(&b[l * rsb..l * rsb + n]) {
                        *cv += av * bv;
                    }
                }
            }
        } else {
            for i in 0..m {
                for j in 0..n {
                    let mut dot = 0.0f32;
                    for l in 0..k {
                        dot += a[i * rsa + l * csa] * b[l * rsb + j * csb];
                    }
                    c[i * n + j] += dot;
                }
            }
        }
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a · b` for row-major `a: [m, p]`, `b: [p, n]`, `c: [m, n]`.
pub(crate) fn gemm_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, p: usize, n: usize) {
    sgemm_acc(m, p, n, a, (p, 1), b, (n, 1), c);
}

/// `c += a · bᵀ` for `a: [m, n]`, `b: [p, n]`, `c: [m, p]`.
pub(crate) fn gemm_nt_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, p: usize) {
    sgemm_acc(m, n, p, a, (n, 1), b, (1, n), c);
}

/// `c += aᵀ · g` for `a: [m, p]`, `g: [m, n]`, `c: [p, n]`.
pub(crate) fn gemm_tn_acc(a: &[f32], g: &[f32], c: &mut [f32], m: usize, p: usize, n: usize) {
    sgemm_acc(p, m, n, a, (1, p), g, (n, 1), c);
}

/// Batched matrix product over the last two axes. Leading axes must match,
/// or one side's leading axes must all be 1 (broadcast).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, out_shape) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * d.m * d.p } else { 0 };
        let bo = if d.b_batched { bi * d.p * d.n } else { 0 };
        gemm_acc(
            &a.data()[ao..ao + d.m * d.p],
            &b.data()[bo..bo + d.p * d.n],
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
            d.m,
            d.p,
            d.n,
        );
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Swap the last two axes.
pub fn transpose_last(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("transpose needs rank >= 2, got {s:?}")));
    }
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = x.numel() / (r * c);
    let mut out = vec![0.0; x.numel()];
    for b in 0..batch {
        let src = &x.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Ok(Tensor::from_parts(shape, out))
}

fn last_extent(x: &Tensor) -> Result<usize> {
    match x.shape().last() {
        Some(&d) => Ok(d),
        None => Err(Error::Shape("operation needs rank >= 1".into())),
    }
}

/// Max-subtracted softmax over the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let d = last_extent(x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// The `k` largest entries of each last-axis slice, in descending order.
/// Equal values keep their original order, so the lower index wins a tie.
pub fn topk_lastdim(x: &Tensor, k: usize) -> Result<(Tensor, Indices)> {
    let d = last_extent(x)?;
    if k == 0 || k > d {
        return Err(Error::Param(format!("top-k needs 1 <= k <= {d}, got k = {k}")));
    }
    let rows = x.numel() / d;
    let mut values = Vec::with_capacity(rows * k);
    let mut indices = Vec::with_capacity(rows * k);
    let mut order: Vec<usize> = Vec::with_capacity(d);
    for row in x.data().chunks(d) {
        order.clear();
        order.extend(0..d);
        // stable sort: ties stay in index order
        order.sort_by(|&i, &j| row[j].total_cmp(&row[i]));
        for &i in &order[..k] {
            values.push(row[i]);
            indices.push(i);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = k;
    Ok((
        Tensor::from_parts(shape.clone(), values),
        Indices::new(shape, indices)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct GatherDims {
    pub batch: usize,
    pub src_batched: bool,
    pub rows: usize,
    pub cols: usize,
    pub k: usize,
}

pub(crate) fn gather_dims(src: &[usize], idx: &Indices) -> Result<(GatherDims, Vec<usize>)> {
    if src.len() < 2 || idx.shape().is_empty() {
        return Err(Error::Dimension {
            op: "gather_rows",
            lhs: src.to_vec(),
            rhs: idx.shape().to_vec(),
        });
    }
    let (rows, cols) = (src[src.len() - 2], src[src.len() - 1]);
    let src_lead = &src[..src.len() - 2];
    let idx_lead = &idx.shape()[..idx.shape().len() - 1];
    let k = *idx.shape().last().unwrap();
    let src_batched = src_lead.iter().product::<usize>() != 1 || src_lead == idx_lead;
    if src_batched && src_lead != idx_lead {
        return Err(Error::Dimension {
            op: "gather_rows",
            lhs: src.to_vec(),
            rhs: idx.shape().to_vec(),
        });
    }
    if let Some(&bad) = idx.data().iter().find(|&&i| i >= rows) {
        return Err(Error::Index {
            index: bad,
            extent: rows,
        });
    }
    let mut out = idx_lead.to_vec();
    out.extend([k, cols]);
    Ok((
        GatherDims {
            batch: idx_lead.iter().product(),
            src_batched,
            rows,
            cols,
            k,
        },
        out,
    ))
}

/// `out[.., i, :] = src[.., idx[.., i], :]`. A source without leading axes
/// is shared by every index row.
pub fn gather_rows(src: &Tensor, idx: &Indices) -> Result<Tensor> {
    let (d, shape) = gather_dims(src.shape(), idx)?;
    let mut out = Vec::with_capacity(d.batch * d.k * d.cols);
    for b in 0..d.batch {
        let base = if d.src_batched { b * d.rows * d.cols } else { 0 };
        for &r in &idx.data()[b * d.k..(b + 1) * d.k] {
            let off = base + r * d.cols;
            out.extend_from_slice(&src.data()[off..off + d.cols]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Flat source offset (pixel index) of every `(region, token)` slot of an
/// `n × n` window partition of a `side × side` map, in output order.
pub(crate) fn window_pixel_map(side: usize, n: usize) -> Vec<usize> {
    let s = side / n;
    let mut map = Vec::with_capacity(side * side);
    for ry in 0..s {
        for rx in 0..s {
            for ty in 0..n {
                for tx in 0..n {
                    map.push((ry * n + ty) * side + rx * n + tx);
                }
            }
        }
    }
    map
}

fn check_window(side_h: usize, side_w: usize, n: usize) -> Result<()> {
    if side_h != side_w {
        return Err(Error::Shape(format!(
            "window partition needs a square map, got {side_h}x{side_w}"
        )));
    }
    if n == 0 || !side_h.is_multiple_of(n) {
        return Err(Error::Shape(format!(
            "window side {n} does not divide map side {side_h}"
        )));
    }
    Ok(())
}

/// `[H, W, C] -> [S², n², C]` with `S = H / n`, regions in row-major order.
pub fn window_partition(x: &Tensor, n: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    check_window(h, w, n)?;
    let map = window_pixel_map(h, n);
    let mut out = Vec::with_capacity(x.numel());
    for &pix in &map {
        out.extend_from_slice(&x.data()[pix * c..(pix + 1) * c]);
    }
    let s = h / n;
    Ok(Tensor::from_parts(vec![s * s, n * n, c], out))
}

/// Inverse of [`window_partition`].
pub fn window_reverse(x: &Tensor, n: usize, side: usize) -> Result<Tensor> {
    let bad = || Error::Shape(format!("cannot reverse {:?} into side {side} with window {n}", x.shape()));
    let [regions, tokens, c] = x.shape()[..] else {
        return Err(bad());
    };
    if n == 0 || !side.is_multiple_of(n) || tokens != n * n || regions * tokens != side * side {
        return Err(bad());
    }
    let map = window_pixel_map(side, n);
    let mut out = vec![0.0; x.numel()];
    for (slot, &pix) in map.iter().enumerate() {
        out[pix * c..(pix + 1) * c].copy_from_slice(&x.data()[slot * c..(slot + 1) * c]);
    }
    Ok(Tensor::from_parts(vec![side, side, c], out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` zeros on each side.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_dims(x: &[usize], w: &[usize], stride: usize, padding: Padding) -> Result<ConvDims> {
    let ([h, wd, cin], [kh, kw, cin2, cout]) = (x, w) else {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    };
    let (h, wd, cin, kh, kw, cin2, cout) = (*h, *wd, *cin, *kh, *kw, *cin2, *cout);
    if cin != cin2 {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("conv2d kernel must be odd, got {kh}x{kw}")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Shape(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    if padding == Padding::Same && kh != kw {
        return Err(Error::Shape("same padding needs a square kernel".into()));
    }
    let pad = match padding {
        Padding::Same => (kh - 1) / 2,
        Padding::Valid => 0,
    };
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}"
        )));
    }
    Ok(ConvDims {
        h,
        w: wd,
        cin,
        kh,
        kw,
        cout,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (wd + 2 * pad - kw) / stride + 1,
    })
}

impl ConvDims {
    /// Input coordinate for output coordinate `o` and kernel tap `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k).checked_sub(self.pad)?;
        (i < extent).then_some(i)
    }
}

/// Cross-correlation of `x: [H, W, Cin]` with `w: [kh, kw, Cin, Cout]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let d = conv_dims(x.shape(), w.shape(), stride, padding)?;
    Ok(Tensor::from_parts(
        vec![d.ho, d.wo, d.cout],
        conv2d_raw(x.data(), w.data(), &d),
    ))
}

/// Patch matrix `[ho·wo, kh·kw·cin]`; zero where the window leaves the input.
fn im2col(x: &[f32], d: &ConvDims) -> Vec<f32> {
    let k = d.kh * d.kw * d.cin;
    let mut cols = vec![0.0f32; d.ho * d.wo * k];
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let row = &mut cols[(oy * d.wo + ox) * k..][..k];
            for ky in 0..d.kh {
                let Some(iy) = d.src(oy, ky, d.h) else { continue };
                for kx in 0..d.kw {
                    let Some(ix) = d.src(ox, kx, d.w) else { continue };
                    row[(ky * d.kw + kx) * d.cin..][..d.cin].copy_from_slice(&x[(iy * d.w + ix) * d.cin..][..d.cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the input grid.
fn col2im(cols: &[f32], d: &ConvDims) -> Vec<f32> {
    let k = d.kh * d.kw * d.cin;
    let mut x = vec![0.0f32; d.h * d.w * d.cin];
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let row = &cols[(oy * d.wo + ox) * k..][..k];
            for ky in 0..d.kh {
                let Some(iy) = d.src(oy, ky, d.h) else { continue };
                for kx in 0..d.kw {
                    let Some(ix) = d.src(ox, kx, d.w) else { continue };
                    let dst = &mut x[(iy * d.w + ix) * d.cin..][..d.cin];
                    for (a, &b) in dst.iter_mut().zip(&row[(ky * d.kw + kx) * d.cin..][..d.cin]) {
                        *a += b;
                    }
                }
            }
        }
    }
    x
}

impl ConvDims {
    /// 1×1 unit-stride convolutions are plain matrix products over pixels.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

pub(crate) fn conv2d_raw(x: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
    let mut out = vec![0.0f32; d.ho * d.wo * d.cout];
    let p = d.ho * d.wo;
    if d.is_pointwise() {
        gemm_acc(x, w, &mut out, p, d.cin, d.cout);
    } else {
        gemm_acc(&im2col(x, d), w, &mut out, p, d.patch_len(), d.cout);
    }
    out
}

/// Gradient with respect to the conv input.
pub(crate) fn conv2d_grad_input(g: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
    let p = d.ho * d.wo;
    let mut dcols = vec![0.0f32; p * d.patch_len()];
    gemm_nt_acc(g, w, &mut dcols, p, d.cout, d.patch_len());
    if d.is_pointwise() {
        dcols
    } else {
        col2im(&dcols, d)
    }
}

/// Gradient with respect to the conv kernel.
pub(crate) fn conv2d_grad_weight(x: &[f32], g: &[f32], d: &ConvDims) -> Vec<f32> {
    let p = d.ho * d.wo;
    let mut dw = vec![0.0f32; d.patch_len() * d.cout];
    if d.is_pointwise() {
        gemm_tn_acc(x, g, &mut dw, p, d.cin, d.cout);
    } else {
        gemm_tn_acc(&im2col(x, d), g, &mut dw, p, d.patch_len(), d.cout);
    }
    dw
}

/// Nearest-neighbour ×2 upsampling of `[H, W, C]`.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let mut out = vec![0.0; 4 * x.numel()];
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let src = ((y / 2) * w + xx / 2) * c;
            let dst = (y * 2 * w + xx) * c;
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Ok(Tensor::from_parts(vec![2 * h, 2 * w, c], out))
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// tanh approximation of GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_K * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x)
}

/// Split a tensor's shape into `(outer, len, inner)` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Arithmetic mean along `axis`, which is removed from the shape.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![0.0f32; outer * inner];
    let inv = 1.0 / len as f32;
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

/// Channels `[start, start + len)` of the last axis.
pub fn slice_last(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = last_extent(x)?;
    if len == 0 || start + len > c {
        return Err(Error::Shape(format!(
            "slice [{start}, {}) outside last extent {c}",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(x.numel() / c * len);
    for row in x.data().chunks(c) {
        out.extend_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Concatenate along the last axis; all leading extents must agree.
pub fn concat_last(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let lead = &first.shape()[..first.rank() - 1];
    for x in xs {
        if x.rank() != first.rank() || &x.shape()[..x.rank() - 1] != lead {
            return Err(Error::Dimension {
                op: "concat_last",
                lhs: first.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
    }
    let widths: Vec<usize> = xs.iter().map(|x| *x.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (x, &w) in xs.iter().zip(&widths) {
            out.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, out))
}
