//! Radix-2 FFT and the real 2-D transforms built on it.
//!
//! Forward transforms are unnormalized; inverse transforms carry the
//! `1 / (H·W)` factor so that `irfft2(rfft2(x)) == x`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex32;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pow2(n: usize, what: &str) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Param(format!("{what} extent {n} is not a power of two")));
    }
    Ok(())
}

thread_local! {
    static TWIDDLES: RefCell<HashMap<usize, Rc<[Complex32]>>> = RefCell::new(HashMap::new());
}

/// `exp(-2πik/n)` for `k < n/2`, computed in f64 and cached per thread.
fn twiddles(n: usize) -> Rc<[Complex32]> {
    TWIDDLES.with(|cache| {
        cache
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                (0..n / 2)
                    .map(|k| {
                        let a = -2.0 * PI * k as f64 / n as f64;
                        Complex32::new(a.cos() as f32, a.sin() as f32)
                    })
                    .collect()
            })
            .clone()
    })
}

/// In-place iterative Cooley-Tukey transform. `inverse` flips the twiddle
/// sign only; no scaling is applied.
pub fn fft_inplace(buf: &mut [Complex32], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    fft_with(buf, &twiddles(n), inverse);
}

fn fft_with(buf: &mut [Complex32], table: &[Complex32], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for chunk in buf.chunks_mut(len) {
            let (lo, hi) = chunk.split_at_mut(half);
            for (k, (a, b)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
                let t = table[k * step];
                let t = if inverse { t.conj() } else { t };
                let v = *b * t;
                *b = *a - v;
                *a += v;
            }
        }
        len <<= 1;
    }
}

/// Row-then-column transform of a row-major `h × w` complex grid.
pub fn fft2_inplace(buf: &mut [Complex32], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    if w > 1 {
        let tw = twiddles(w);
        for row in buf.chunks_mut(w) {
            fft_with(row, &tw, inverse);
        }
    }
    if h <= 1 {
        return;
    }
    let th = twiddles(h);
    let mut col = vec![Complex32::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        fft_with(&mut col, &th, inverse);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Non-redundant half of a real 2-D spectrum: `h` rows by `w / 2 + 1` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub bins: Vec<Complex32>,
}

impl Spectrum {
    pub fn half_width(&self) -> usize {
        self.w / 2 + 1
    }

    pub fn get(&self, u: usize, v: usize) -> Complex32 {
        self.bins[u * self.half_width() + v]
    }
}

/// Forward transform of a real `[H, W]` (or `[H, W, 1]`) tensor.
pub fn rfft2(x: &Tensor) -> Result<Spectrum> {
    let (h, w) = match x.shape() {
        [h, w] | [h, w, 1] => (*h, *w),
        s => return Err(Error::Shape(format!("rfft2 expects [H, W], got {s:?}"))),
    };
    check_pow2(h, "rfft2 height")?;
    check_pow2(w, "rfft2 width")?;
    Ok(rfft2_plane(x.data(), h, w))
}

pub(crate) fn rfft2_plane(plane: &[f32], h: usize, w: usize) -> Spectrum {
    let mut buf: Vec<Complex32> = plane.iter().map(|&v| Complex32::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, h, w, false);
    let hw = w / 2 + 1;
    let mut bins = Vec::with_capacity(h * hw);
    for row in buf.chunks(w) {
        bins.extend_from_slice(&row[..hw]);
    }
    Spectrum { h, w, bins }
}

/// Inverse of [`rfft2`], producing a `[H, W]` tensor.
pub fn irfft2(spec: &Spectrum, h: usize, w: usize) -> Result<Tensor> {
    check_pow2(h, "irfft2 height")?;
    check_pow2(w, "irfft2 width")?;
    if spec.h != h || spec.w != w || spec.bins.len() != h * (w / 2 + 1) {
        return Err(Error::Shape(format!(
            "spectrum of {}x{} cannot be inverted to {h}x{w}",
            spec.h, spec.w
        )));
    }
    Ok(Tensor::from_parts(vec![h, w], irfft2_plane(spec)))
}

pub(crate) fn irfft2_plane(spec: &Spectrum) -> Vec<f32> {
    let (h, w) = (spec.h, spec.w);
    let mut full = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            full.push(if v <= w / 2 {
                spec.get(u, v)
            } else {
                spec.get((h - u) % h, w - v).conj()
            });
        }
    }
    fft2_inplace(&mut full, h, w, true);
    let scale = 1.0 / (h * w) as f32;
    full.iter().map(|c| c.re * scale).collect()
}

/// Binary mask over the half spectrum keeping bins whose radius is at most
/// `cutoff`. Radius is measured in units of the per-axis Nyquist frequency,
/// so the DC bin has radius 0 and the axis Nyquist bins have radius 1.
pub fn radial_lowpass_mask(h: usize, w: usize, cutoff: f32) -> Vec<f32> {
    let signed = |k: usize, n: usize| -> f64 {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        2.0 * k / n as f64
    };
    let hw = w / 2 + 1;
    let mut mask = Vec::with_capacity(h * hw);
    for u in 0..h {
        for v in 0..hw {
            let r = (signed(u, h).powi(2) + signed(v, w).powi(2)).sqrt();
            mask.push(if r <= cutoff as f64 { 1.0 } else { 0.0 });
        }
    }
    mask
}

/// Applies a half-spectrum mask to every channel of an `[H, W, C]` tensor.
/// The mask must be symmetric under `k -> -k`; that makes the filtered
/// signal real and the operator self-adjoint, and lets two channels share
/// one complex transform as its real and imaginary parts.
pub(crate) fn filter_channels(x: &Tensor, mask: &[f32]) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    check_pow2(h, "spectral filter height")?;
    check_pow2(w, "spectral filter width")?;
    let hw = w / 2 + 1;
    debug_assert_eq!(mask.len(), h * hw);
    let full_mask: Vec<f32> = (0..h * w)
        .map(|i| {
            let (u, v) = (i / w, i % w);
            if v < hw {
                mask[u * hw + v]
            } else {
                mask[((h - u) % h) * hw + w - v]
            }
        })
        .collect();
    let scale = 1.0 / (h * w) as f32;
    let data = x.data();
    let mut out = vec![0.0f32; x.numel()];
    let mut buf = vec![Complex32::new(0.0, 0.0); h * w];
    for ch in (0..c).step_by(2) {
        let pair = ch + 1 < c;
        for (i, z) in buf.iter_mut().enumerate() {
            let im = if pair { data[i * c + ch + 1] } else { 0.0 };
            *z = Complex32::new(data[i * c + ch], im);
        }
        fft2_inplace(&mut buf, h, w, false);
        for (z, &m) in buf.iter_mut().zip(&full_mask) {
            *z *= m;
        }
        fft2_inplace(&mut buf, h, w, true);
        for (i, z) in buf.iter().enumerate() {
            out[i * c + ch] = z.re * scale;
            if pair {
                out[i * c + ch + 1] = z.im * scale;
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Mean complex magnitude of the half spectrum of each channel, and its
/// gradient with respect to the input.
pub(crate) fn spectral_l1_with_grad(x: &Tensor) -> Result<(f32, Tensor)> {
    let (h, w, c) = x.hwc()?;
    check_pow2(h, "spectral loss height")?;
    check_pow2(w, "spectral loss width")?;
    let hw = w / 2 + 1;
    let count = (c * h * hw) as f64;
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; x.numel()];
    let mut plane = vec![0.0f32; h * w];
    // the inverse transform below is unnormalized, leaving only the mean's 1/N
    let scale = 1.0 / count;
    for ch in 0..c {
        for (i, p) in plane.iter_mut().enumerate() {
            *p = x.data()[i * c + ch];
        }
        let spec = rfft2_plane(&plane, h, w);
        // d|D_k|/dx = Re(conj(D_k/|D_k|) e^{-i k.x}); summing over the kept
        // half is a full inverse transform of the unit phasors placed there.
        let mut full = vec![Complex32::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..hw {
                let d = spec.get(u, v);
                let mag = d.norm();
                total += mag as f64;
                if mag > 0.0 {
                    full[u * w + v] = d / mag;
                }
            }
        }
        fft2_inplace(&mut full, h, w, true);
        for (i, z) in full.iter().enumerate() {
            grad[i * c + ch] = (z.re as f64 * scale) as f32;
        }
    }
    Ok(((total / count) as f32, Tensor::from_parts(vec![h, w, c], grad)))
}
