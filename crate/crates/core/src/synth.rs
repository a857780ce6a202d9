//! Paired training-data synthesis.
//!
//! Real short/long exposure pairs are replaced by a simulator: a clean image
//! becomes a synthetic Bayer mosaic, and [`degrade`] renders the short
//! exposure by scaling the signal down, drawing Poisson photoelectrons,
//! and adding Gaussian read noise. Pairing the result with the original
//! frame gives (noisy, clean) data with a controllable exposure ratio.
//!
//! The model is shot + read noise only; row noise and quantization banding
//! of full physical sensor models are deliberately left out.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isp::CfaPattern;
use crate::isp::{gamma_expand, ColorState, ImagePlane, RawFrame, IDENTITY_CCM};
use crate::rng::Rng;

/// Physical parameters of the simulated sensor.
///
/// `system_gain` is in DN per photoelectron; `read_sigma` in DN. A
/// `system_gain` of exactly 0 disables shot noise (the noise-free limit).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SensorNoiseParams {
    pub system_gain: f32,
    pub read_sigma: f32,
    pub black_level: u16,
    pub white_level: u16,
    pub seed: u64,
}

impl Default for SensorNoiseParams {
    fn default() -> Self {
        SensorNoiseParams {
            system_gain: 8.0,
            read_sigma: 12.0,
            black_level: 512,
            white_level: 16383,
            seed: 0,
        }
    }
}

impl SensorNoiseParams {
    pub fn validate(&self) -> Result<()> {
        if self.system_gain < 0.0 {
            return Err(Error::config(format!(
                "system gain must be >= 0, got {}",
                self.system_gain
            )));
        }
        if self.read_sigma < 0.0 {
            return Err(Error::config(format!(
                "read sigma must be >= 0, got {}",
                self.read_sigma
            )));
        }
        if self.black_level >= self.white_level {
            return Err(Error::config(format!(
                "black level {} must be below white level {}",
                self.black_level, self.white_level
            )));
        }
        Ok(())
    }
}

/// Simulate a short exposure of `clean` at the given exposure ratio.
///
/// Per pixel: the linear signal (DN above black) is divided by the ratio,
/// converted to a Poisson photoelectron count with mean `signal / K`,
/// scaled back by `K`, perturbed by Gaussian read noise, shifted back above
/// the black level, rounded, and clamped to `[0, white_level]`.
/// Deterministic for a fixed `params.seed`.
pub fn degrade(
    clean: &RawFrame,
    exposure_ratio: f32,
    params: &SensorNoiseParams,
) -> Result<RawFrame> {
    clean.validate()?;
    params.validate()?;
    if exposure_ratio < 1.0 {
        return Err(Error::config(format!(
            "exposure ratio {exposure_ratio} must be >= 1"
        )));
    }
    let mut rng = Rng::new(params.seed);
    let black = clean.black_level as f64;
    let white = clean.white_level as f64;
    let k = params.system_gain as f64;
    let sigma = params.read_sigma as f64;
    let ratio = exposure_ratio as f64;

    let mosaic = clean
        .mosaic
        .iter()
        .map(|&dn| {
            let signal = (dn as f64 - black).max(0.0);
            let short = signal / ratio;
            let shot = if k > 0.0 {
                k * rng.poisson(short / k) as f64
            } else {
                short
            };
            let read = if sigma > 0.0 {
                sigma * rng.normal_f64()
            } else {
                0.0
            };
            let out = libm::round(shot + read + black);
            out.max(0.0).min(white) as u16
        })
        .collect();

    Ok(RawFrame {
        mosaic,
        exposure_ratio,
        ..clean.clone()
    })
}

/// Build a synthetic full-exposure [`RawFrame`] from a clean image by
/// inverting the binning demosaic (G replicated into G1 and G2), undoing
/// the normalization, and laying the channels out as an RGGB mosaic.
/// sRGB inputs are first converted back to linear.
pub fn frame_from_clean_image(img: &ImagePlane, params: &SensorNoiseParams) -> Result<RawFrame> {
    params.validate()?;
    let linear = match img.color_state {
        ColorState::LinearRgb => img.clone(),
        ColorState::Srgb => gamma_expand(img)?,
        ColorState::PackedRgbg => {
            return Err(Error::config(
                "clean images must be linear RGB or sRGB, not packed",
            ))
        }
    };
    if linear.channels != 3 {
        return Err(Error::shape(format!(
            "clean image must have 3 channels, found {}",
            linear.channels
        )));
    }
    let (hw, hh) = (linear.width, linear.height);
    let (w, h) = (hw * 2, hh * 2);
    let black = params.black_level as f64;
    let range = (params.white_level - params.black_level) as f64;
    let n = hw * hh;
    let to_dn = |v: f32| -> u16 {
        let dn = libm::round((v as f64).clamp(0.0, 1.0) * range + black);
        dn.max(0.0).min(u16::MAX as f64) as u16
    };
    // RGGB: R at (0,0), G at (0,1) and (1,0), B at (1,1)
    let mut mosaic = vec![0u16; w * h];
    for y in 0..hh {
        for x in 0..hw {
            let r = to_dn(linear.data[y * hw + x]);
            let g = to_dn(linear.data[n + y * hw + x]);
            let b = to_dn(linear.data[2 * n + y * hw + x]);
            mosaic[(2 * y) * w + 2 * x] = r;
            mosaic[(2 * y) * w + 2 * x + 1] = g;
            mosaic[(2 * y + 1) * w + 2 * x] = g;
            mosaic[(2 * y + 1) * w + 2 * x + 1] = b;
        }
    }
    Ok(RawFrame {
        width: w,
        height: h,
        mosaic,
        cfa_pattern: CfaPattern::Rggb,
        black_level: params.black_level,
        white_level: params.white_level,
        wb_gains: [1.0, 1.0, 1.0],
        ccm: IDENTITY_CCM,
        exposure_ratio: 1.0,
    })
}

/// One (noisy, clean) pair per `(image, ratio)` combination.
///
/// Pair `(i, j)` draws from an independent stream seeded
/// `base ^ i ^ (j << 32)`, so generation is order-independent and
/// bit-reproducible.
pub fn make_dataset(
    clean_images: &[ImagePlane],
    ratios: &[f32],
    params: &SensorNoiseParams,
) -> Result<Vec<(RawFrame, RawFrame)>> {
    if clean_images.is_empty() {
        return Err(Error::config("make_dataset needs at least one clean image"));
    }
    if ratios.is_empty() {
        return Err(Error::config(
            "make_dataset needs at least one exposure ratio",
        ));
    }
    let mut pairs = Vec::with_capacity(clean_images.len() * ratios.len());
    for (i, img) in clean_images.iter().enumerate() {
        let clean = frame_from_clean_image(img, params)?;
        for (j, &ratio) in ratios.iter().enumerate() {
            let pair_params = SensorNoiseParams {
                seed: params.seed ^ i as u64 ^ ((j as u64) << 32),
                ..*params
            };
            let noisy = degrade(&clean, ratio, &pair_params)?;
            pairs.push((noisy, clean.clone()));
        }
    }
    Ok(pairs)
}
