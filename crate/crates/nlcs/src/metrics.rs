//! Reconstruction quality metrics on `[1,1,H,W]` images in `[0, peak]`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Sentinel returned when the images are bit-identical (MSE = 0).
pub const PSNR_IDENTICAL: f64 = 100.0;

fn image_data<E: Element>(a: &Tensor<E>, b: &Tensor<E>, op: &'static str) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 4 || sa[0] != 1 || sa[1] != 1 {
        return Err(Error::dim(
            op,
            format!("expected matching [1,1,H,W] images, got {:?} and {:?}", sa, sb),
        ));
    }
    let av: Vec<f64> = a.to_vec().iter().map(|v| v.as_f64()).collect();
    let bv: Vec<f64> = b.to_vec().iter().map(|v| v.as_f64()).collect();
    Ok((av, bv, sa[2], sa[3]))
}

/// 10·log₁₀(peak²/MSE) in dB; identical inputs map to [`PSNR_IDENTICAL`].
pub fn psnr<E: Element>(a: &Tensor<E>, b: &Tensor<E>, peak: f64) -> Result<f64> {
    let (av, bv, _, _) = image_data(a, b, "psnr")?;
    let mse = av
        .iter()
        .zip(&bv)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / av.len() as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite("psnr".into()));
    }
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW - 1) as f64 / 2.0;
    let g1: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g1 {
        for b in &g1 {
            w.push(a * b);
        }
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean SSIM over valid (unpadded) 11×11 Gaussian windows, σ=1.5,
/// K1=0.01, K2=0.03. Images smaller than the window fall back to a single
/// uniform full-image window.
pub fn ssim<E: Element>(a: &Tensor<E>, b: &Tensor<E>, peak: f64) -> Result<f64> {
    let (av, bv, h, w) = image_data(a, b, "ssim")?;
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);

    let window_ssim = |weights: &[f64], idx: &[usize]| -> f64 {
        let mut mu_x = 0.0;
        let mut mu_y = 0.0;
        for (&wt, &i) in weights.iter().zip(idx) {
            mu_x += wt * av[i];
            mu_y += wt * bv[i];
        }
        let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
        for (&wt, &i) in weights.iter().zip(idx) {
            let dx = av[i] - mu_x;
            let dy = bv[i] - mu_y;
            var_x += wt * dx * dx;
            var_y += wt * dy * dy;
            cov += wt * dx * dy;
        }
        ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
            / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
    };

    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = h * w;
        let weights = vec![1.0 / n as f64; n];
        let idx: Vec<usize> = (0..n).collect();
        return Ok(window_ssim(&weights, &idx));
    }

    let weights = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut idx = vec![0usize; SSIM_WINDOW * SSIM_WINDOW];
    for top in 0..=h - SSIM_WINDOW {
        for left in 0..=w - SSIM_WINDOW {
            for r in 0..SSIM_WINDOW {
                for c in 0..SSIM_WINDOW {
                    idx[r * SSIM_WINDOW + c] = (top + r) * w + left + c;
                }
            }
            total += window_ssim(&weights, &idx);
            count += 1;
        }
    }
    Ok(total / count as f64)
}
