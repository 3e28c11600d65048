//! Reconstruction fidelity metrics.

use crate::sampler::Trajectory;
use crate::{Error, Latent, Result};

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Latent, b: &Latent) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(a.shape(), b.shape()));
    }
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Mean local SSIM over all 8x8 windows at stride 1, uniform weighting,
/// population variances, dynamic range 1.
pub fn ssim(a: &Latent, b: &Latent) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(a.shape(), b.shape()));
    }
    if a.ndim() != 2 {
        return Err(Error::Usage(format!(
            "ssim needs 2D images, got {} dims",
            a.ndim()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Usage(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let a = a.view().into_dimensionality::<ndarray::Ix2>().expect("2D");
    let b = b.view().into_dimensionality::<ndarray::Ix2>().expect("2D");
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let mut sum_a = 0.0;
            let mut sum_b = 0.0;
            for di in 0..SSIM_WINDOW {
                for dj in 0..SSIM_WINDOW {
                    sum_a += a[[i + di, j + dj]];
                    sum_b += b[[i + di, j + dj]];
                }
            }
            let mu_a = sum_a / n;
            let mu_b = sum_b / n;
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for di in 0..SSIM_WINDOW {
                for dj in 0..SSIM_WINDOW {
                    let da = a[[i + di, j + dj]] - mu_a;
                    let db = b[[i + di, j + dj]] - mu_b;
                    var_a += da * da;
                    var_b += db * db;
                    cov += da * db;
                }
            }
            var_a /= n;
            var_b /= n;
            cov /= n;
            let num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2);
            let den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Per-rung Euclidean distance between two same-length trajectories.
pub fn trajectory_deviation(a: &Trajectory, b: &Trajectory) -> Result<Vec<(usize, f64)>> {
    if a.latents.len() != b.latents.len() {
        return Err(Error::Usage(format!(
            "trajectory lengths differ: {} vs {}",
            a.latents.len(),
            b.latents.len()
        )));
    }
    let mut out = Vec::with_capacity(a.latents.len());
    for (t, (x, y)) in a.latents.iter().zip(b.latents.iter()).enumerate() {
        if x.shape() != y.shape() {
            return Err(Error::shape_mismatch(x.shape(), y.shape()));
        }
        let d = x
            .iter()
            .zip(y.iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        out.push((t, d));
    }
    Ok(out)
}
