//! Image quality metrics on `[C, H, W]` tensors with values in `[0, 1]`.

use crate::tensor::{Result, Tensor, TensorError};

/// Returned by [`psnr`] for identical images.
pub const PSNR_INFINITE: f64 = f64::INFINITY;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    let (x, y) = (a.data(), b.data());
    Ok(x.iter().zip(y.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64)
}

/// `10·log10(1 / MSE)` in dB; [`PSNR_INFINITE`] when the images match.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_INFINITE);
    }
    Ok(-10.0 * m.log10())
}

fn grayscale(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(TensorError::InvalidShape(t.shape().to_vec())),
    };
    let d = t.data();
    let n = h * w;
    let g = (0..n)
        .map(|i| (0..c).map(|ch| d[ch * n + i]).sum::<f64>() / c as f64)
        .collect();
    Ok((g, h, w))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Single-scale SSIM of the channel-mean grayscale images, averaged over
/// all valid 11×11 Gaussian windows.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (x, h, w) = grayscale(a)?;
    let (y, _, _) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(TensorError::Config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (u, gu) in g.iter().enumerate() {
                for (v, gv) in g.iter().enumerate() {
                    let k = gu * gv;
                    let idx = (i + u) * w + j + v;
                    let (p, q) = (x[idx], y[idx]);
                    mx += k * p;
                    my += k * q;
                    xx += k * p * p;
                    yy += k * q * q;
                    xy += k * p * q;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
