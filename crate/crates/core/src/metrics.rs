//! Image-quality and payload-recovery metrics: PSNR, single-scale SSIM, and
//! bit accuracy.

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;
use crate::num::Scalar;

/// PSNR sentinel for bit-identical inputs (MSE = 0).
pub const PSNR_IDENTICAL_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of the [0,1] images the toolkit works in.
const SSIM_L: f64 = 1.0;

pub fn mse<T: Scalar>(a: &ImageBuf<T>, b: &ImageBuf<T>) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "mse of {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.widen() - y.widen();
        acc += d * d;
    }
    Ok(acc / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB for unit-peak images; identical inputs hit
/// the 99 dB sentinel instead of infinity.
pub fn psnr<T: Scalar>(a: &ImageBuf<T>, b: &ImageBuf<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_IDENTICAL_DB);
    }
    Ok(10.0 * (SSIM_L * SSIM_L / m).log10())
}

/// Single-scale SSIM over the luma plane: 11x11 Gaussian window (sigma 1.5),
/// K1=0.01 / K2=0.03, unit dynamic range, averaged over fully-valid windows
/// (no padding).
pub fn ssim<T: Scalar>(a: &ImageBuf<T>, b: &ImageBuf<T>) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Shape("ssim of differently shaped images".into()));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let la: Vec<f64> = a.luma()?.iter().map(|v| v.widen()).collect();
    let lb: Vec<f64> = b.luma()?.iter().map(|v| v.widen()).collect();

    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let (mut mu_a, mut mu_b) = (0.0f64, 0.0f64);
            let (mut saa, mut sbb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
            for wy in 0..SSIM_WINDOW {
                let row = (y0 + wy) * w + x0;
                let wrow = &win[wy * SSIM_WINDOW..(wy + 1) * SSIM_WINDOW];
                for wx in 0..SSIM_WINDOW {
                    let wgt = wrow[wx];
                    let va = la[row + wx];
                    let vb = lb[row + wx];
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let var_a = saa - mu_a * mu_a;
            let var_b = sbb - mu_b * mu_b;
            let cov = sab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut win = vec![0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            win[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut win {
        *v /= sum;
    }
    win
}

/// Fraction of positions where the bit vectors agree.
pub fn bit_accuracy(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Validation(format!(
            "bit accuracy needs equal nonzero lengths, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}
