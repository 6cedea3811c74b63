//! PSNR and SSIM on the 8-bit scale.
//!
//! Images arrive in [−1, 1] and are mapped to integers in [0, 255] before any
//! metric is computed. SSIM runs on the unweighted channel mean.

use serde::{Deserialize, Serialize};

use crate::latent::ImageBatch;
use crate::{Error, Result};

/// Value returned for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub psnr: f64,
    pub ssim: f64,
    /// Mean squared error in squared 8-bit units.
    pub mse: f64,
}

pub fn mse_8bit(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(255² / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP)
}

pub fn psnr_8bit(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(psnr_from_mse(mse_8bit(a, b)?))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region Gaussian filtering of an `h×w` plane.
fn filter(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM between two single-channel `h×w` planes on the 8-bit scale.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape(format!(
            "planes of {} and {} samples for {h}×{w}",
            a.len(),
            b.len()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let g = gaussian_window();
    let mu_a = filter(a, h, w, &g);
    let mu_b = filter(b, h, w, &g);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let s_aa = filter(&aa, h, w, &g);
    let s_bb = filter(&bb, h, w, &g);
    let s_ab = filter(&ab, h, w, &g);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = s_aa[i] - ma * ma;
        let vb = s_bb[i] - mb * mb;
        let cov = s_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Channel-mean gray plane of a `3×h×w` (CHW) 8-bit image.
pub fn gray(chw: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    (0..n)
        .map(|i| (chw[i] + chw[n + i] + chw[2 * n + i]) / 3.0)
        .collect()
}

fn check_pair(x: &ImageBatch, y: &ImageBatch) -> Result<()> {
    if x.tensor().dims() != y.tensor().dims() {
        return Err(Error::Shape(format!(
            "image batches {:?} and {:?} differ",
            x.tensor().dims(),
            y.tensor().dims()
        )));
    }
    Ok(())
}

/// PSNR, SSIM and MSE for every image pair of two batches.
pub fn evaluate(x: &ImageBatch, y: &ImageBatch) -> Result<Vec<MetricResult>> {
    check_pair(x, y)?;
    let (h, w) = (x.height(), x.width());
    (0..x.len())
        .map(|i| {
            let a = x.to_8bit(i)?;
            let b = y.to_8bit(i)?;
            let mse = mse_8bit(&a, &b)?;
            Ok(MetricResult {
                psnr: psnr_from_mse(mse),
                ssim: ssim_plane(&gray(&a, h, w), &gray(&b, h, w), h, w)?,
                mse,
            })
        })
        .collect()
}

/// Mean per-image PSNR of a batch pair.
pub fn psnr(x: &ImageBatch, y: &ImageBatch) -> Result<f64> {
    check_pair(x, y)?;
    let v = (0..x.len())
        .map(|i| psnr_8bit(&x.to_8bit(i)?, &y.to_8bit(i)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

/// Mean per-image SSIM of a batch pair.
pub fn ssim(x: &ImageBatch, y: &ImageBatch) -> Result<f64> {
    let v = evaluate(x, y)?;
    Ok(v.iter().map(|m| m.ssim).sum::<f64>() / v.len().max(1) as f64)
}
