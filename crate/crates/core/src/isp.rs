//! Deterministic raw-Bayer preprocessing.
//!
//! Two fixed compositions are exposed: [`raw_to_lrgb`] produces the
//! brightened linear-RGB input for the enhancement network
//! (pack -> linearize -> amplify -> white balance -> binning demosaic), and
//! [`raw_to_srgb_reference`] is the classic target pipeline
//! (pack -> linearize -> white balance -> binning demosaic -> color
//! correction -> gamma), with no amplification.
//!
//! All stages are pure functions over immutable inputs. Image data is stored
//! planar (channel-major, row-major within a channel), matching the tensor
//! layout used by the trainable modules.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::powf64;

/// 2x2 color filter array layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CfaPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl CfaPattern {
    pub const ALL: [CfaPattern; 4] = [
        CfaPattern::Rggb,
        CfaPattern::Bggr,
        CfaPattern::Grbg,
        CfaPattern::Gbrg,
    ];

    /// Offsets `(row, col)` of the R, G1, G2, B sites within a 2x2 tile.
    /// G1 is the green sharing a row with red, G2 the green sharing a row
    /// with blue, so the packed channel order is pattern-independent.
    pub fn offsets(self) -> [(usize, usize); 4] {
        match self {
            CfaPattern::Rggb => [(0, 0), (0, 1), (1, 0), (1, 1)],
            CfaPattern::Bggr => [(1, 1), (1, 0), (0, 1), (0, 0)],
            CfaPattern::Grbg => [(0, 1), (0, 0), (1, 1), (1, 0)],
            CfaPattern::Gbrg => [(1, 0), (1, 1), (0, 0), (0, 1)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CfaPattern::Rggb => "RGGB",
            CfaPattern::Bggr => "BGGR",
            CfaPattern::Grbg => "GRBG",
            CfaPattern::Gbrg => "GBRG",
        }
    }

    pub fn parse(s: &str) -> Result<CfaPattern> {
        match s {
            "RGGB" => Ok(CfaPattern::Rggb),
            "BGGR" => Ok(CfaPattern::Bggr),
            "GRBG" => Ok(CfaPattern::Grbg),
            "GBRG" => Ok(CfaPattern::Gbrg),
            other => Err(Error::config(format!("unknown CFA pattern {other:?}"))),
        }
    }
}

/// A 16-bit Bayer mosaic plus the sensor metadata needed to develop it.
#[derive(Debug, Clone)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    pub mosaic: Vec<u16>,
    pub cfa_pattern: CfaPattern,
    pub black_level: u16,
    pub white_level: u16,
    pub wb_gains: [f32; 3],
    pub ccm: [f32; 9],
    /// Digital gain applied during development (long/short exposure ratio).
    pub exposure_ratio: f32,
}

impl RawFrame {
    pub fn validate(&self) -> Result<()> {
        if self.mosaic.len() != self.width * self.height {
            return Err(Error::shape(format!(
                "mosaic of {} samples does not match {}x{}",
                self.mosaic.len(),
                self.width,
                self.height
            )));
        }
        if self.black_level >= self.white_level {
            return Err(Error::config(format!(
                "black level {} must be below white level {}",
                self.black_level, self.white_level
            )));
        }
        if self.exposure_ratio < 1.0 {
            return Err(Error::config(format!(
                "exposure ratio {} must be >= 1",
                self.exposure_ratio
            )));
        }
        if self.wb_gains.iter().any(|&g| g <= 0.0) {
            return Err(Error::config(format!(
                "white balance gains must be positive, got {:?}",
                self.wb_gains
            )));
        }
        Ok(())
    }
}

/// Color state of an [`ImagePlane`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorState {
    /// Half-resolution 4-channel R, G1, G2, B.
    PackedRgbg,
    /// Demosaiced, still linear in scene radiance.
    LinearRgb,
    /// Display-referred, after color correction and gamma.
    Srgb,
}

/// Floating-point image in a declared color state. Data is planar:
/// channel-major, then row-major.
#[derive(Debug, Clone)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub color_state: ColorState,
}

impl ImagePlane {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
        color_state: ColorState,
    ) -> Result<ImagePlane> {
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "image data of {} values does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if color_state == ColorState::PackedRgbg && channels != 4 {
            return Err(Error::shape(format!(
                "packed-RGBG image must have 4 channels, found {channels}"
            )));
        }
        Ok(ImagePlane {
            width,
            height,
            channels,
            data,
            color_state,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize, state: ColorState) -> ImagePlane {
        ImagePlane {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            color_state: state,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.channels)
            .map(|c| self.data[(c * self.height + y) * self.width + x])
            .collect()
    }

    fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    fn expect_state(&self, state: ColorState, what: &str) -> Result<()> {
        if self.color_state != state {
            return Err(Error::shape(format!(
                "{what} expects {state:?} input, found {:?}",
                self.color_state
            )));
        }
        Ok(())
    }
}

/// Rearrange a Bayer mosaic into a half-resolution 4-channel R, G1, G2, B
/// image. Lossless: [`unpack_bayer`] restores the mosaic bit-exactly.
pub fn pack_bayer(frame: &RawFrame) -> Result<ImagePlane> {
    frame.validate()?;
    if frame.width % 2 != 0 || frame.height % 2 != 0 {
        return Err(Error::shape(format!(
            "mosaic dimensions must be even, found {}x{}",
            frame.width, frame.height
        )));
    }
    let (hw, hh) = (frame.width / 2, frame.height / 2);
    let offsets = frame.cfa_pattern.offsets();
    let mut data = vec![0.0f32; hw * hh * 4];
    for (c, &(dy, dx)) in offsets.iter().enumerate() {
        let plane = &mut data[c * hw * hh..(c + 1) * hw * hh];
        for ty in 0..hh {
            let src_row = (2 * ty + dy) * frame.width;
            for tx in 0..hw {
                plane[ty * hw + tx] = frame.mosaic[src_row + 2 * tx + dx] as f32;
            }
        }
    }
    ImagePlane::new(hw, hh, 4, data, ColorState::PackedRgbg)
}

/// Inverse of [`pack_bayer`] for values still in digital numbers.
pub fn unpack_bayer(packed: &ImagePlane, pattern: CfaPattern) -> Result<Vec<u16>> {
    packed.expect_state(ColorState::PackedRgbg, "unpack_bayer")?;
    let (hw, hh) = (packed.width, packed.height);
    let (w, h) = (hw * 2, hh * 2);
    let offsets = pattern.offsets();
    let mut mosaic = vec![0u16; w * h];
    for (c, &(dy, dx)) in offsets.iter().enumerate() {
        let plane = packed.plane(c);
        for ty in 0..hh {
            for tx in 0..hw {
                mosaic[(2 * ty + dy) * w + 2 * tx + dx] = plane[ty * hw + tx] as u16;
            }
        }
    }
    Ok(mosaic)
}

/// Subtract the black level and normalize to `[0, 1]` of the usable range.
pub fn linearize(packed: &ImagePlane, black_level: u16, white_level: u16) -> Result<ImagePlane> {
    if white_level <= black_level {
        return Err(Error::config(format!(
            "white level {white_level} must exceed black level {black_level}"
        )));
    }
    let black = black_level as f32;
    let range = (white_level - black_level) as f32;
    let data = packed
        .data
        .iter()
        .map(|&v| ((v - black) / range).max(0.0).min(1.0))
        .collect();
    let mut out = packed.clone();
    out.data = data;
    Ok(out)
}

/// Digital gain, clamped to `[0, 1]`.
pub fn amplify(img: &ImagePlane, ratio: f32) -> Result<ImagePlane> {
    if ratio < 1.0 {
        return Err(Error::config(format!(
            "amplification ratio {ratio} must be >= 1"
        )));
    }
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (*v * ratio).min(1.0);
    }
    Ok(out)
}

/// Per-channel white balance on packed R, G1, G2, B; both greens share the
/// green gain. Clamps to `[0, 1]`.
pub fn white_balance(packed: &ImagePlane, gains: [f32; 3]) -> Result<ImagePlane> {
    packed.expect_state(ColorState::PackedRgbg, "white_balance")?;
    if gains.iter().any(|&g| g <= 0.0) {
        return Err(Error::config(format!(
            "white balance gains must be positive, got {gains:?}"
        )));
    }
    let per_channel = [gains[0], gains[1], gains[1], gains[2]];
    let n = packed.width * packed.height;
    let mut out = packed.clone();
    for (c, &gain) in per_channel.iter().enumerate() {
        for v in &mut out.data[c * n..(c + 1) * n] {
            *v = (*v * gain).min(1.0);
        }
    }
    Ok(out)
}

/// Binning demosaic: keep R and B, average the two greens. Output stays at
/// the packed (half-mosaic) resolution.
pub fn demosaic_bin(packed: &ImagePlane) -> Result<ImagePlane> {
    packed.expect_state(ColorState::PackedRgbg, "demosaic_bin")?;
    if packed.channels != 4 {
        return Err(Error::shape(format!(
            "demosaic_bin expects 4 channels, found {}",
            packed.channels
        )));
    }
    let n = packed.width * packed.height;
    let mut data = vec![0.0f32; n * 3];
    let (r, g1, g2, b) = (
        packed.plane(0),
        packed.plane(1),
        packed.plane(2),
        packed.plane(3),
    );
    data[..n].copy_from_slice(r);
    for i in 0..n {
        data[n + i] = 0.5 * (g1[i] + g2[i]);
    }
    data[2 * n..].copy_from_slice(b);
    ImagePlane::new(packed.width, packed.height, 3, data, ColorState::LinearRgb)
}

/// Per-pixel 3x3 color matrix, then clamp to `[0, 1]`.
pub fn color_correct(lrgb: &ImagePlane, ccm: &[f32; 9]) -> Result<ImagePlane> {
    lrgb.expect_state(ColorState::LinearRgb, "color_correct")?;
    let n = lrgb.width * lrgb.height;
    let (r, g, b) = (lrgb.plane(0), lrgb.plane(1), lrgb.plane(2));
    let mut data = vec![0.0f32; n * 3];
    for i in 0..n {
        for row in 0..3 {
            let v = ccm[row * 3] * r[i] + ccm[row * 3 + 1] * g[i] + ccm[row * 3 + 2] * b[i];
            data[row * n + i] = v.max(0.0).min(1.0);
        }
    }
    ImagePlane::new(lrgb.width, lrgb.height, 3, data, ColorState::LinearRgb)
}

/// Scalar sRGB transfer function on `[0, 1]`.
pub fn srgb_encode(v: f32) -> f32 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * crate::num::powf32(v, 1.0 / 2.4) - 0.055
    }
}

/// Analytic inverse of [`srgb_encode`].
pub fn srgb_decode(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        powf64(((v as f64) + 0.055) / 1.055, 2.4) as f32
    }
}

/// Standard sRGB gamma compression of a linear-RGB image.
pub fn gamma_compress(lrgb: &ImagePlane) -> Result<ImagePlane> {
    lrgb.expect_state(ColorState::LinearRgb, "gamma_compress")?;
    let mut out = lrgb.clone();
    for v in &mut out.data {
        *v = srgb_encode(v.max(0.0).min(1.0));
    }
    out.color_state = ColorState::Srgb;
    Ok(out)
}

/// Inverse gamma: sRGB back to linear RGB.
pub fn gamma_expand(srgb: &ImagePlane) -> Result<ImagePlane> {
    srgb.expect_state(ColorState::Srgb, "gamma_expand")?;
    let mut out = srgb.clone();
    for v in &mut out.data {
        *v = srgb_decode(v.max(0.0).min(1.0));
    }
    out.color_state = ColorState::LinearRgb;
    Ok(out)
}

/// Development pipeline ahead of the enhancement network: brightened linear
/// RGB at half mosaic resolution.
pub fn raw_to_lrgb(frame: &RawFrame) -> Result<ImagePlane> {
    let packed = pack_bayer(frame)?;
    let lin = linearize(&packed, frame.black_level, frame.white_level)?;
    let amp = amplify(&lin, frame.exposure_ratio)?;
    let wb = white_balance(&amp, frame.wb_gains)?;
    demosaic_bin(&wb)
}

/// Reference development used to derive clean sRGB targets from
/// long-exposure raws. No amplification.
pub fn raw_to_srgb_reference(frame: &RawFrame) -> Result<ImagePlane> {
    let packed = pack_bayer(frame)?;
    let lin = linearize(&packed, frame.black_level, frame.white_level)?;
    let wb = white_balance(&lin, frame.wb_gains)?;
    let lrgb = demosaic_bin(&wb)?;
    let corrected = color_correct(&lrgb, &frame.ccm)?;
    gamma_compress(&corrected)
}

pub const IDENTITY_CCM: [f32; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_2x2(pattern: CfaPattern, mosaic: Vec<u16>) -> RawFrame {
        RawFrame {
            width: 2,
            height: 2,
            mosaic,
            cfa_pattern: pattern,
            black_level: 0,
            white_level: 16383,
            wb_gains: [1.0, 1.0, 1.0],
            ccm: IDENTITY_CCM,
            exposure_ratio: 1.0,
        }
    }

    #[test]
    fn pack_2x2_rggb() {
        let frame = frame_2x2(CfaPattern::Rggb, vec![100, 200, 150, 50]);
        let packed = pack_bayer(&frame).unwrap();
        assert_eq!(packed.width, 1);
        assert_eq!(packed.height, 1);
        assert_eq!(packed.data, vec![100.0, 200.0, 150.0, 50.0]);
    }

    #[test]
    fn pack_4x4_gathers_sub_lattices() {
        // index-arithmetic oracle: mosaic[y][x] = 100*y + x
        let mut mosaic = vec![0u16; 16];
        for y in 0..4 {
            for x in 0..4 {
                mosaic[y * 4 + x] = (100 * y + x) as u16;
            }
        }
        for pattern in CfaPattern::ALL {
            let mut frame = frame_2x2(pattern, mosaic.clone());
            frame.width = 4;
            frame.height = 4;
            let packed = pack_bayer(&frame).unwrap();
            let offsets = pattern.offsets();
            for (c, &(dy, dx)) in offsets.iter().enumerate() {
                for ty in 0..2 {
                    for tx in 0..2 {
                        let expected = (100 * (2 * ty + dy) + 2 * tx + dx) as f32;
                        assert_eq!(
                            packed.data[(c * 2 + ty) * 2 + tx],
                            expected,
                            "{pattern:?} c{c} ({ty},{tx})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn pack_rejects_odd_dimensions() {
        let mut frame = frame_2x2(CfaPattern::Rggb, vec![0; 12]);
        frame.width = 3;
        frame.height = 4;
        assert!(matches!(pack_bayer(&frame), Err(Error::Shape(_))));
    }

    #[test]
    fn pack_unpack_round_trip_all_patterns() {
        let mut state = 1u32;
        for pattern in CfaPattern::ALL {
            let mosaic: Vec<u16> = (0..6 * 4)
                .map(|_| {
                    state = state.wrapping_mul(1664525).wrapping_add(1013904223);
                    (state >> 16) as u16
                })
                .collect();
            let mut frame = frame_2x2(pattern, mosaic.clone());
            frame.width = 6;
            frame.height = 4;
            frame.white_level = u16::MAX;
            let packed = pack_bayer(&frame).unwrap();
            let restored = unpack_bayer(&packed, pattern).unwrap();
            assert_eq!(restored, mosaic, "{pattern:?}");
        }
    }

    #[test]
    fn linearize_black_white_and_midpoint() {
        let img = ImagePlane {
            width: 2,
            height: 1,
            channels: 1,
            data: vec![512.0, 16383.0],
            color_state: ColorState::PackedRgbg,
        };
        let lin = linearize(&img, 512, 16383).unwrap();
        assert_eq!(lin.data[0], 0.0);
        assert_eq!(lin.data[1], 1.0);

        let img2 = ImagePlane {
            data: vec![8448.0, 0.0],
            ..img
        };
        let lin2 = linearize(&img2, 512, 16383).unwrap();
        let expected = (8448.0 - 512.0) / 15871.0; // ~ 0.50003
        assert!((lin2.data[0] - expected).abs() < 1e-6);
        assert!((lin2.data[0] - 0.50003).abs() < 1e-4);
        // values below black clamp to 0
        assert_eq!(lin2.data[1], 0.0);
    }

    #[test]
    fn amplify_scales_and_clamps() {
        let img = ImagePlane {
            width: 2,
            height: 1,
            channels: 1,
            data: vec![0.001, 0.01],
            color_state: ColorState::LinearRgb,
        };
        let out = amplify(&img, 300.0).unwrap();
        assert!((out.data[0] - 0.3).abs() < 1e-6);
        assert_eq!(out.data[1], 1.0);
        assert!(matches!(amplify(&img, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn white_balance_behaviour() {
        let img = ImagePlane {
            width: 1,
            height: 1,
            channels: 4,
            data: vec![0.1, 0.2, 0.2, 0.1],
            color_state: ColorState::PackedRgbg,
        };
        let id = white_balance(&img, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(id.data, img.data);
        let wb = white_balance(&img, [2.0, 1.0, 1.5]).unwrap();
        let expected = [0.2, 0.2, 0.2, 0.15000001];
        for (a, e) in wb.data.iter().zip(expected) {
            assert!((a - e).abs() < 1e-6);
        }
        let hot = ImagePlane {
            data: vec![0.9, 0.1, 0.1, 0.1],
            ..img.clone()
        };
        assert_eq!(white_balance(&hot, [2.0, 1.0, 1.0]).unwrap().data[0], 1.0);
        assert!(matches!(
            white_balance(&img, [0.0, 1.0, 1.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn demosaic_bin_averages_greens() {
        let img = ImagePlane {
            width: 1,
            height: 1,
            channels: 4,
            data: vec![0.4, 0.2, 0.4, 0.1],
            color_state: ColorState::PackedRgbg,
        };
        let rgb = demosaic_bin(&img).unwrap();
        assert_eq!(rgb.channels, 3);
        assert_eq!(rgb.width, 1);
        assert_eq!(rgb.data, vec![0.4, 0.3, 0.1]);

        let constant = ImagePlane {
            width: 3,
            height: 2,
            channels: 4,
            data: vec![0.25; 24],
            color_state: ColorState::PackedRgbg,
        };
        let out = demosaic_bin(&constant).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
        assert_eq!((out.width, out.height, out.channels), (3, 2, 3));
    }

    #[test]
    fn color_correct_identity_and_gray_invariance() {
        let img = ImagePlane {
            width: 1,
            height: 1,
            channels: 3,
            data: vec![0.3, 0.5, 0.7],
            color_state: ColorState::LinearRgb,
        };
        let id = color_correct(&img, &IDENTITY_CCM).unwrap();
        assert_eq!(id.data, img.data);

        // rows summing to 1 leave gray pixels unchanged
        let ccm = [0.7, 0.2, 0.1, 0.05, 0.9, 0.05, 0.1, 0.3, 0.6];
        let gray = ImagePlane {
            data: vec![0.42, 0.42, 0.42],
            ..img.clone()
        };
        let out = color_correct(&gray, &ccm).unwrap();
        for v in out.data {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn color_correct_matches_per_pixel_matmul_oracle() {
        let mut state = 7u32;
        let mut rand = || {
            state = state.wrapping_mul(1664525).wrapping_add(1013904223);
            (state >> 8) as f32 / (1u32 << 24) as f32
        };
        let data: Vec<f32> = (0..3 * 4).map(|_| rand()).collect();
        let ccm = [0.9, 0.05, 0.05, -0.1, 1.05, 0.05, 0.0, -0.2, 1.2];
        let img = ImagePlane {
            width: 2,
            height: 2,
            channels: 3,
            data: data.clone(),
            color_state: ColorState::LinearRgb,
        };
        let out = color_correct(&img, &ccm).unwrap();
        for i in 0..4 {
            let px = [data[i], data[4 + i], data[8 + i]];
            for row in 0..3 {
                let mut v: f32 = (0..3).map(|c| ccm[row * 3 + c] * px[c]).sum();
                v = v.clamp(0.0, 1.0);
                assert_eq!(out.data[row * 4 + i], v);
            }
        }
    }

    #[test]
    fn gamma_endpoints_continuity_and_half() {
        assert_eq!(srgb_encode(0.0), 0.0);
        assert!((srgb_encode(1.0) - 1.0).abs() < 1e-6);
        // both branches agree at the threshold
        let lo = 12.92 * 0.0031308;
        let hi = 1.055 * crate::num::powf32(0.0031308, 1.0 / 2.4) - 0.055;
        assert!((lo - hi).abs() < 1e-4);
        assert!((srgb_encode(0.0031308) - 0.04045).abs() < 1e-4);
        // closed form at 0.5
        let expected = 1.055 * crate::num::powf32(0.5, 1.0 / 2.4) - 0.055;
        assert!((srgb_encode(0.5) - expected).abs() < 1e-7);
        assert!((srgb_encode(0.5) - 0.7354).abs() < 1e-4);
    }

    #[test]
    fn gamma_round_trip_within_1e6() {
        for i in 0..=1000 {
            let v = i as f32 / 1000.0;
            let rt = srgb_decode(srgb_encode(v));
            assert!((rt - v).abs() < 1e-6, "{v} -> {rt}");
        }
    }

    #[test]
    fn raw_to_lrgb_constant_frame_matches_hand_composition() {
        // constant mosaic of 2048 DN, black 512, white 16383, ratio 4,
        // gains (1.5, 1.0, 2.0): each stage is computable by hand.
        let frame = RawFrame {
            width: 4,
            height: 4,
            mosaic: vec![2048; 16],
            cfa_pattern: CfaPattern::Bggr,
            black_level: 512,
            white_level: 16383,
            wb_gains: [1.5, 1.0, 2.0],
            ccm: IDENTITY_CCM,
            exposure_ratio: 4.0,
        };
        let lin = (2048.0 - 512.0) / 15871.0;
        let amp = (lin * 4.0_f32).min(1.0);
        let expect_r = (amp * 1.5).min(1.0);
        let expect_g = amp;
        let expect_b = (amp * 2.0_f32).min(1.0);
        let lrgb = raw_to_lrgb(&frame).unwrap();
        assert_eq!((lrgb.width, lrgb.height, lrgb.channels), (2, 2, 3));
        for i in 0..4 {
            assert!((lrgb.data[i] - expect_r).abs() < 1e-6);
            assert!((lrgb.data[4 + i] - expect_g).abs() < 1e-6);
            assert!((lrgb.data[8 + i] - expect_b).abs() < 1e-6);
        }
    }

    #[test]
    fn raw_to_lrgb_trivial_settings_is_pack_and_bin() {
        let mosaic: Vec<u16> = (0..16).map(|i| (i * 1000) as u16).collect();
        let frame = RawFrame {
            width: 4,
            height: 4,
            mosaic: mosaic.clone(),
            cfa_pattern: CfaPattern::Rggb,
            black_level: 0,
            white_level: u16::MAX,
            wb_gains: [1.0, 1.0, 1.0],
            ccm: IDENTITY_CCM,
            exposure_ratio: 1.0,
        };
        let lrgb = raw_to_lrgb(&frame).unwrap();
        let packed = pack_bayer(&frame).unwrap();
        let max = u16::MAX as f32;
        for ty in 0..2 {
            for tx in 0..2 {
                let i = ty * 2 + tx;
                let r = packed.data[i] / max;
                let g = 0.5 * (packed.data[4 + i] + packed.data[8 + i]) / max;
                let b = packed.data[12 + i] / max;
                assert!((lrgb.data[i] - r).abs() < 1e-7);
                assert!((lrgb.data[4 + i] - g).abs() < 1e-7);
                assert!((lrgb.data[8 + i] - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn pipelines_propagate_first_stage_error() {
        let mut frame = frame_2x2(CfaPattern::Rggb, vec![0; 4]);
        frame.black_level = 100;
        frame.white_level = 100;
        assert!(matches!(raw_to_lrgb(&frame), Err(Error::Config(_))));
        assert!(matches!(raw_to_srgb_reference(&frame), Err(Error::Config(_))));
    }

    #[test]
    fn reference_pipeline_with_trivial_settings_is_gamma_of_binned() {
        let frame = RawFrame {
            width: 4,
            height: 4,
            mosaic: (0..16).map(|i| (i * 512) as u16).collect(),
            cfa_pattern: CfaPattern::Grbg,
            black_level: 0,
            white_level: 8192,
            wb_gains: [1.0, 1.0, 1.0],
            ccm: IDENTITY_CCM,
            exposure_ratio: 1.0,
        };
        let srgb = raw_to_srgb_reference(&frame).unwrap();
        assert_eq!(srgb.color_state, ColorState::Srgb);
        let packed = pack_bayer(&frame).unwrap();
        let lin = linearize(&packed, 0, 8192).unwrap();
        let rgb = demosaic_bin(&lin).unwrap();
        for (s, l) in srgb.data.iter().zip(&rgb.data) {
            assert!((s - srgb_encode(*l)).abs() < 1e-6);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range_and_finite() {
        let mut state = 3u32;
        let mosaic: Vec<u16> = (0..8 * 8)
            .map(|_| {
                state = state.wrapping_mul(1664525).wrapping_add(1013904223);
                (state >> 16) as u16
            })
            .collect();
        let frame = RawFrame {
            width: 8,
            height: 8,
            mosaic,
            cfa_pattern: CfaPattern::Gbrg,
            black_level: 512,
            white_level: 16383,
            wb_gains: [2.1, 1.0, 1.7],
            ccm: [1.4, -0.3, -0.1, -0.2, 1.5, -0.3, 0.0, -0.4, 1.4],
            exposure_ratio: 123.0,
        };
        for img in [raw_to_lrgb(&frame).unwrap(), raw_to_srgb_reference(&frame).unwrap()] {
            for &v in &img.data {
                assert!(v.is_finite());
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn stage_color_state_checking_rejects_wrong_inputs() {
        let rgb = ImagePlane::zeros(2, 2, 3, ColorState::LinearRgb);
        assert!(white_balance(&rgb, [1.0, 1.0, 1.0]).is_err());
        assert!(demosaic_bin(&rgb).is_err());
        let srgb = ImagePlane::zeros(2, 2, 3, ColorState::Srgb);
        assert!(gamma_compress(&srgb).is_err());
        assert!(color_correct(&srgb, &IDENTITY_CCM).is_err());
    }
}
