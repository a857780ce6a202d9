//! The raw-frame container: a binary 16-bit PGM (P5, maxval 65535,
//! big-endian samples) holding the Bayer mosaic, plus a `<stem>.meta.json`
//! sidecar with the sensor metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use darklift_core::isp::{CfaPattern, RawFrame};

/// JSON sidecar schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawMeta {
    pub cfa_pattern: String,
    pub black_level: u16,
    pub white_level: u16,
    pub wb_gains: [f32; 3],
    pub ccm: [f32; 9],
    pub exposure_ratio: f32,
}

/// Sidecar path for a mosaic file: `foo.pgm` -> `foo.meta.json`.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("meta.json")
}

/// Write the mosaic as binary PGM and the metadata sidecar next to it.
pub fn write_raw(path: &Path, frame: &RawFrame) -> Result<()> {
    frame.validate().map_err(anyhow::Error::msg)?;
    let mut buf = Vec::with_capacity(frame.mosaic.len() * 2 + 32);
    write!(buf, "P5\n{} {}\n65535\n", frame.width, frame.height)?;
    for &v in &frame.mosaic {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    let meta = RawMeta {
        cfa_pattern: frame.cfa_pattern.name().to_string(),
        black_level: frame.black_level,
        white_level: frame.white_level,
        wb_gains: frame.wb_gains,
        ccm: frame.ccm,
        exposure_ratio: frame.exposure_ratio,
    };
    let sidecar = sidecar_path(path);
    fs::write(&sidecar, serde_json::to_vec_pretty(&meta)?)
        .with_context(|| format!("writing {}", sidecar.display()))?;
    Ok(())
}

/// Read a PGM + sidecar pair back into a [`RawFrame`].
pub fn read_raw(path: &Path) -> Result<RawFrame> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (width, height, maxval, offset) = parse_pgm_header(&bytes)
        .with_context(|| format!("parsing PGM header of {}", path.display()))?;
    if maxval != 65535 {
        bail!("{}: expected 16-bit PGM (maxval 65535), found {maxval}", path.display());
    }
    let need = width * height * 2;
    if bytes.len() < offset + need {
        bail!(
            "{}: truncated sample data ({} bytes, need {})",
            path.display(),
            bytes.len() - offset,
            need
        );
    }
    let mosaic: Vec<u16> = bytes[offset..offset + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    let sidecar = sidecar_path(path);
    let meta: RawMeta = serde_json::from_slice(
        &fs::read(&sidecar)
            .with_context(|| format!("missing metadata sidecar {}", sidecar.display()))?,
    )
    .with_context(|| format!("parsing {}", sidecar.display()))?;
    let frame = RawFrame {
        width,
        height,
        mosaic,
        cfa_pattern: CfaPattern::parse(&meta.cfa_pattern).map_err(anyhow::Error::msg)?,
        black_level: meta.black_level,
        white_level: meta.white_level,
        wb_gains: meta.wb_gains,
        ccm: meta.ccm,
        exposure_ratio: meta.exposure_ratio,
    };
    frame.validate().map_err(anyhow::Error::msg)?;
    Ok(frame)
}

/// Parse a binary PGM header, tolerating comments. Returns
/// `(width, height, maxval, data_offset)`.
fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, u32, usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        bail!("not a binary PGM (missing P5 magic)");
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comment lines
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
            bail!("malformed PGM header");
        }
        *field = std::str::from_utf8(&bytes[start..pos])?.parse()?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        bail!("malformed PGM header");
    }
    pos += 1; // single whitespace before sample data
    Ok((fields[0], fields[1], fields[2] as u32, pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use darklift_core::isp::IDENTITY_CCM;

    fn frame() -> RawFrame {
        RawFrame {
            width: 4,
            height: 2,
            mosaic: vec![0, 1, 512, 65535, 12345, 60000, 7, 42],
            cfa_pattern: CfaPattern::Grbg,
            black_level: 0,
            white_level: 65535,
            wb_gains: [1.5, 1.0, 2.0],
            ccm: IDENTITY_CCM,
            exposure_ratio: 100.0,
        }
    }

    #[test]
    fn round_trips_mosaic_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.pgm");
        let f = frame();
        write_raw(&path, &f).unwrap();
        let back = read_raw(&path).unwrap();
        assert_eq!(back.mosaic, f.mosaic);
        assert_eq!(back.cfa_pattern, f.cfa_pattern);
        assert_eq!(back.wb_gains, f.wb_gains);
        assert_eq!(back.exposure_ratio, f.exposure_ratio);
    }

    #[test]
    fn big_endian_sample_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.pgm");
        let mut f = frame();
        f.width = 2;
        f.height = 2;
        f.mosaic = vec![0x0102, 0x0304, 0xA0B0, 0x0000];
        write_raw(&path, &f).unwrap();
        let bytes = fs::read(&path).unwrap();
        let data = &bytes[bytes.len() - 8..];
        assert_eq!(data, &[0x01, 0x02, 0x03, 0x04, 0xA0, 0xB0, 0x00, 0x00]);
    }

    #[test]
    fn missing_sidecar_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        write_raw(&path, &frame()).unwrap();
        fs::remove_file(sidecar_path(&path)).unwrap();
        let err = read_raw(&path).unwrap_err();
        assert!(format!("{err:#}").contains("sidecar"), "{err:#}");
    }

    #[test]
    fn rejects_non_16bit_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("8bit.pgm");
        fs::write(&p8, b"P5\n2 2\n255\n\x00\x01\x02\x03").unwrap();
        assert!(read_raw(&p8).is_err());

        let short = dir.path().join("short.pgm");
        fs::write(&short, b"P5\n4 4\n65535\n\x00\x01").unwrap();
        assert!(read_raw(&short).is_err());
    }
}
