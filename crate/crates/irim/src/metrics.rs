//! Evaluation metrics: normalized MSE, peak signal-to-noise ratio, and
//! structural similarity.
//!
//! PSNR uses the maximum of the reference image as the peak. SSIM uses a
//! uniform 7x7 window over fully-contained positions, k1 = 0.01, k2 = 0.03,
//! and dynamic range max(x) - min(x) of the reference.

use crate::error::{IrimError, Result};
use ndarray::{ArrayView2, ArrayViewD};

/// ||x_hat - x||^2 / ||x||^2.
pub fn nmse(x_hat: &ArrayViewD<f64>, x: &ArrayViewD<f64>) -> Result<f64> {
    if x_hat.shape() != x.shape() {
        return Err(IrimError::shape(
            "nmse",
            format!("{:?}", x.shape()),
            format!("{:?}", x_hat.shape()),
        ));
    }
    let denom: f64 = x.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(IrimError::Config("nmse reference has zero norm".into()));
    }
    let num: f64 = x_hat.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(num / denom)
}

/// 10 log10(max(x)^2 / MSE). Identical images yield +infinity.
pub fn psnr(x_hat: &ArrayViewD<f64>, x: &ArrayViewD<f64>) -> Result<f64> {
    if x_hat.shape() != x.shape() {
        return Err(IrimError::shape(
            "psnr",
            format!("{:?}", x.shape()),
            format!("{:?}", x_hat.shape()),
        ));
    }
    let n = x.len() as f64;
    let mse: f64 = x_hat.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let peak = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean local SSIM over all fully-contained 7x7 windows.
pub fn ssim(x_hat: &ArrayView2<f64>, x: &ArrayView2<f64>) -> Result<f64> {
    if x_hat.dim() != x.dim() {
        return Err(IrimError::shape(
            "ssim",
            format!("{:?}", x.dim()),
            format!("{:?}", x_hat.dim()),
        ));
    }
    let (h, w) = x.dim();
    let win = SSIM_WINDOW;
    if h < win || w < win {
        return Err(IrimError::Config(format!(
            "ssim needs at least {win}x{win} images, got {h}x{w}"
        )));
    }
    let range = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        - x.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for dy in 0..win {
                for dx in 0..win {
                    mu_a += x_hat[[y0 + dy, x0 + dx]];
                    mu_b += x[[y0 + dy, x0 + dx]];
                }
            }
            mu_a /= n;
            mu_b /= n;
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for dy in 0..win {
                for dx in 0..win {
                    let a = x_hat[[y0 + dy, x0 + dx]] - mu_a;
                    let b = x[[y0 + dy, x0 + dx]] - mu_b;
                    var_a += a * a;
                    var_b += b * b;
                    cov += a * b;
                }
            }
            var_a /= n;
            var_b /= n;
            cov /= n;
            let score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += score;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
