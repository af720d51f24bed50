//! Image quality metrics over `[3, H, W]` frames with values in [0, 1].
//!
//! All arithmetic runs in 64-bit regardless of the tensor element type, so a
//! metric value is identical whether the frames arrive as `f32` or `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// PSNR in decibels against a peak signal of 1.0, capped at 99 dB so
/// identical frames compare as a finite number.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair<E: Elem>(a: &Tensor<E>, b: &Tensor<E>, what: &str) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: frame shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s = a.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!(
            "{what} expects [3, H, W] frames, got {s:?}"
        )));
    }
    Ok((s[1], s[2]))
}

/// Peak signal-to-noise ratio between two RGB frames.
pub fn psnr_rgb<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<f64> {
    check_pair(a, b, "psnr_rgb")?;
    let mut se = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to64() - y.to64();
        se += d * d;
    }
    let mse = se / a.numel() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Normalised 11x11 Gaussian window, sigma 1.5.
fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            total += v;
        }
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Structural similarity between two RGB frames: mean SSIM over all fully
/// interior (valid) 11x11 Gaussian windows of every channel.
pub fn ssim_rgb<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<f64> {
    let (h, w) = check_pair(a, b, "ssim_rgb")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim_rgb needs frames at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let ad = a.data();
    let bd = b.data();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..3 {
        let base = ch * h * w;
        for wy in 0..=h - SSIM_WINDOW {
            for wx in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                let (mut xx, mut yy, mut xy) = (0.0f64, 0.0f64, 0.0f64);
                for ky in 0..SSIM_WINDOW {
                    let row = base + (wy + ky) * w + wx;
                    for kx in 0..SSIM_WINDOW {
                        let g = win[ky * SSIM_WINDOW + kx];
                        let x = ad[row + kx].to64();
                        let y = bd[row + kx].to64();
                        mx += g * x;
                        my += g * y;
                        xx += g * x * x;
                        yy += g * y * y;
                        // Group the cross term so swapping the inputs is
                        // bitwise neutral.
                        xy += g * (x * y);
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// One per-frame row of an evaluation report.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub sequence: String,
    pub frame: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Write evaluation rows as CSV with a fixed header, six decimal places.
pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut out = String::from("sequence,frame,psnr_db,ssim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.sequence, r.frame, r.psnr_db, r.ssim
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
