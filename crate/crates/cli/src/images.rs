//! sRGB image files: 8-bit PNG or binary PPM (P6), selected by extension.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

use darklift_core::isp::{ColorState, ImagePlane};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

/// Interleave a planar 3-channel image into RGB8 bytes.
fn interleave_rgb8(img: &ImagePlane) -> Result<Vec<u8>> {
    if img.channels != 3 {
        bail!("expected a 3-channel image, found {}", img.channels);
    }
    let n = img.width * img.height;
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        out.push(to_u8(img.data[i]));
        out.push(to_u8(img.data[n + i]));
        out.push(to_u8(img.data[2 * n + i]));
    }
    Ok(out)
}

fn deinterleave_rgb8(bytes: &[u8], width: usize, height: usize) -> ImagePlane {
    let n = width * height;
    let mut data = vec![0.0f32; n * 3];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = bytes[i * 3 + c] as f32 / 255.0;
        }
    }
    ImagePlane {
        width,
        height,
        channels: 3,
        data,
        color_state: ColorState::Srgb,
    }
}

/// Write an sRGB image as PNG or PPM depending on the file extension.
pub fn write_srgb(path: &Path, img: &ImagePlane) -> Result<()> {
    let rgb = interleave_rgb8(img)?;
    match extension_of(path)?.as_str() {
        "png" => {
            image::save_buffer(
                path,
                &rgb,
                img.width as u32,
                img.height as u32,
                image::ColorType::Rgb8,
            )
            .with_context(|| format!("writing {}", path.display()))?;
        }
        "ppm" => {
            let mut buf = Vec::with_capacity(rgb.len() + 32);
            write!(buf, "P6\n{} {}\n255\n", img.width, img.height)?;
            buf.extend_from_slice(&rgb);
            fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
        }
        other => bail!("unsupported image extension {other:?} (use .png or .ppm)"),
    }
    Ok(())
}

/// Read a PNG or PPM file as an sRGB image.
pub fn read_srgb(path: &Path) -> Result<ImagePlane> {
    match extension_of(path)?.as_str() {
        "png" => {
            let img = image::open(path)
                .with_context(|| format!("reading {}", path.display()))?
                .into_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok(deinterleave_rgb8(img.as_raw(), w, h))
        }
        "ppm" => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            parse_ppm(&bytes).with_context(|| format!("parsing {}", path.display()))
        }
        other => bail!("unsupported image extension {other:?} (use .png or .ppm)"),
    }
}

fn extension_of(path: &Path) -> Result<String> {
    Ok(path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default())
}

fn parse_ppm(bytes: &[u8]) -> Result<ImagePlane> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        bail!("not a binary PPM (missing P6 magic)");
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            bail!("malformed PPM header");
        }
        *field = std::str::from_utf8(&bytes[start..pos])?.parse()?;
    }
    if fields[2] != 255 {
        bail!("expected 8-bit PPM (maxval 255), found {}", fields[2]);
    }
    pos += 1;
    let (w, h) = (fields[0], fields[1]);
    let need = w * h * 3;
    if bytes.len() < pos + need {
        bail!("truncated PPM sample data");
    }
    Ok(deinterleave_rgb8(&bytes[pos..pos + need], w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(side: usize) -> ImagePlane {
        let n = side * side;
        let mut data = vec![0.0f32; 3 * n];
        for y in 0..side {
            for x in 0..side {
                data[y * side + x] = x as f32 / (side - 1) as f32;
                data[n + y * side + x] = y as f32 / (side - 1) as f32;
                data[2 * n + y * side + x] = 0.25;
            }
        }
        ImagePlane {
            width: side,
            height: side,
            channels: 3,
            data,
            color_state: ColorState::Srgb,
        }
    }

    #[test]
    fn png_and_ppm_round_trip_at_8bit_precision() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(16);
        for name in ["img.png", "img.ppm"] {
            let path = dir.path().join(name);
            write_srgb(&path, &img).unwrap();
            let back = read_srgb(&path).unwrap();
            assert_eq!((back.width, back.height), (16, 16));
            for (a, b) in img.data.iter().zip(&back.data) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_unknown_extension() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(8);
        assert!(write_srgb(&dir.path().join("img.bmp"), &img).is_err());
    }
}
