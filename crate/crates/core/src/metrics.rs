//! PSNR and SSIM image quality metrics, plus the evaluation report schema.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isp::ImagePlane;
use crate::num::log10_64;

/// Identical images would give infinite PSNR; reports cap it here.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_geometry(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::shape(format!(
            "images {}x{}x{} and {}x{}x{} differ",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// `10 log10(max^2 / MSE)` in dB, capped at [`PSNR_CAP_DB`] for identical
/// images. Accumulates in f64.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, max_val: f64) -> Result<f64> {
    check_same_geometry(a, b)?;
    let mut se = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = x as f64 - y as f64;
        se += d * d;
    }
    let mse = se / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * log10_64(max_val * max_val / mse)).min(PSNR_CAP_DB))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = libm::exp(-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
        sum += *t;
    }
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Separable valid-mode Gaussian filtering of one channel plane.
fn gaussian_filter(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // horizontal pass
    let mut hpass = vec![0.0f64; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                s += t * plane[y * w + x + k];
            }
            hpass[y * ow + x] = s;
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                s += t * hpass[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Standard SSIM over an 11x11 Gaussian window (sigma 1.5, K1 = 0.01,
/// K2 = 0.03, dynamic range 1), averaged over valid window positions and
/// channels.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    check_same_geometry(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::config(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let (w, h) = (a.width, a.height);
    let n = w * h;
    let mut total = 0.0f64;
    for c in 0..a.channels {
        let pa: Vec<f64> = a.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = gaussian_filter(&pa, w, h);
        let mu_b = gaussian_filter(&pb, w, h);
        let m_aa = gaussian_filter(&aa, w, h);
        let m_bb = gaussian_filter(&bb, w, h);
        let m_ab = gaussian_filter(&ab, w, h);
        let mut sum = 0.0f64;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            sum += num / den;
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / a.channels as f64)
}

/// Per-image evaluation entry. `lpips` is reserved for external tools and
/// stays null here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEval {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub runtime_seconds: f64,
    pub lpips: Option<f64>,
}

/// Evaluation report; means are plain arithmetic averages of the per-image
/// values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageEval>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_runtime_seconds: f64,
}

impl EvalReport {
    pub fn from_entries(per_image: Vec<ImageEval>) -> Result<EvalReport> {
        if per_image.is_empty() {
            return Err(Error::config("report needs at least one image"));
        }
        let n = per_image.len() as f64;
        let mean_psnr_db = per_image.iter().map(|e| e.psnr_db).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|e| e.ssim).sum::<f64>() / n;
        let mean_runtime_seconds = per_image.iter().map(|e| e.runtime_seconds).sum::<f64>() / n;
        Ok(EvalReport {
            per_image,
            mean_psnr_db,
            mean_ssim,
            mean_runtime_seconds,
        })
    }
}
