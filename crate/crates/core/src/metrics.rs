//! PSNR and single-scale SSIM for images with values in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR returned when the mean squared error falls below [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 120.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-12;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn between(pred: &Tensor, target: &Tensor) -> Result<Self> {
        Ok(MetricReport {
            psnr_db: psnr(pred, target)?,
            ssim: ssim(pred, target)?,
        })
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "mse")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// `10 log10(1 / MSE)` with peak value 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(-10.0 * m.log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable Gaussian filtering of an `h × w` plane.
fn blur_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(y + k) * wo + x]).sum();
        }
    }
    out
}

/// Adjoint of [`blur_valid`]: spreads an `(h-10) × (w-10)` map back onto `h × w`.
fn blur_valid_adjoint(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..ho {
        for x in 0..wo {
            let v = src[y * wo + x];
            for k in 0..SSIM_WINDOW {
                tmp[(y + k) * wo + x] += g[k] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..wo {
            let v = tmp[y * wo + x];
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += g[k] * v;
            }
        }
    }
    out
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    a.expect_same_shape(b, "ssim")?;
    let (h, w, c) = a.hwc()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Param(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    Ok((h, w, c))
}

/// Mean SSIM over valid window positions, averaged across channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_impl(a, b, false).map(|(v, _)| v)
}

/// SSIM together with its analytic gradient with respect to `a`.
pub fn ssim_with_grad(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(a: &Tensor, b: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let (h, w, c) = check_pair(a, b)?;
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let positions = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
    let norm = 1.0 / (positions * c) as f64;

    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0f32; a.numel()]);
    let plane = |t: &Tensor, ch: usize| -> Vec<f64> {
        (0..h * w).map(|i| t.data()[i * c + ch] as f64).collect()
    };
    for ch in 0..c {
        let x = plane(a, ch);
        let y = plane(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = blur_valid(&x, h, w, &g);
        let mu_y = blur_valid(&y, h, w, &g);
        let e_xx = blur_valid(&xx, h, w, &g);
        let e_yy = blur_valid(&yy, h, w, &g);
        let e_xy = blur_valid(&xy, h, w, &g);

        let mut coef_mu = vec![0.0; positions];
        let mut coef_xx = vec![0.0; positions];
        let mut coef_xy = vec![0.0; positions];
        for p in 0..positions {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let a1 = 2.0 * mx * my + c1;
            let a2 = 2.0 * (e_xy[p] - mx * my) + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = (e_xx[p] - mx * mx) + (e_yy[p] - my * my) + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                // d log S = dA1/A1 + dA2/A2 - dB1/B1 - dB2/B2
                coef_mu[p] = s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2);
                coef_xy[p] = s * 2.0 / a2;
                coef_xx[p] = -s / b2;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let d_mu = blur_valid_adjoint(&coef_mu, h, w, &g);
            let d_xx = blur_valid_adjoint(&coef_xx, h, w, &g);
            let d_xy = blur_valid_adjoint(&coef_xy, h, w, &g);
            for i in 0..h * w {
                let v = d_mu[i] + 2.0 * x[i] * d_xx[i] + y[i] * d_xy[i];
                grad[i * c + ch] = (v * norm) as f32;
            }
        }
    }
    let grad = grad.map(|g| Tensor::from_parts(a.shape().to_vec(), g));
    Ok((total * norm, grad))
}
