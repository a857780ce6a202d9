//! Dataset and evaluation manifests (JSON), and loading of training pairs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use darklift_core::isp::{raw_to_lrgb, raw_to_srgb_reference};
use darklift_core::train::TrainPair;

use crate::pgm;

/// One (noisy, clean) raw pair; paths are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    pub noisy: String,
    pub clean: String,
}

/// One (test, reference) sRGB image pair for metric evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPairEntry {
    pub test: String,
    pub reference: String,
}

pub fn write_pairs_manifest(path: &Path, entries: &[PairEntry]) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(entries)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_pairs_manifest(path: &Path) -> Result<Vec<PairEntry>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing {}", path.display()))?)
}

pub fn read_eval_manifest(path: &Path) -> Result<Vec<EvalPairEntry>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing {}", path.display()))?)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Develop every manifest pair into training tensors: the noisy raw through
/// the brightened linear-RGB pipeline, the clean raw through the sRGB
/// reference pipeline.
pub fn load_training_pairs(manifest_path: &Path) -> Result<Vec<TrainPair>> {
    let entries = read_pairs_manifest(manifest_path)?;
    if entries.is_empty() {
        bail!("manifest {} lists no pairs", manifest_path.display());
    }
    let mut pairs = Vec::with_capacity(entries.len());
    for e in &entries {
        let noisy_frame = pgm::read_raw(&resolve(manifest_path, &e.noisy))?;
        let clean_frame = pgm::read_raw(&resolve(manifest_path, &e.clean))?;
        pairs.push(TrainPair {
            noisy_lrgb: raw_to_lrgb(&noisy_frame).map_err(anyhow::Error::msg)?,
            clean_srgb: raw_to_srgb_reference(&clean_frame).map_err(anyhow::Error::msg)?,
        });
    }
    Ok(pairs)
}

/// The paths of one dataset pair on disk.
pub fn pair_paths(dir: &Path, index: usize, ratio: f32) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("pair{index:04}_x{ratio:.0}_noisy.pgm")),
        dir.join(format!("pair{index:04}_x{ratio:.0}_clean.pgm")),
    )
}
