//! Versioned binary checkpoint: a named-tensor table plus a config
//! snapshot, integrity-checked with CRC32.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "DLCK"            4 bytes
//! version u32               currently 1
//! kind    u8                1 = VAE, 2 = diffusion (U-Net + context)
//! config  u32 len + JSON    model configuration snapshot
//! count   u32               number of tensors
//! tensor  name (u16 len + UTF-8), dtype u8 (0 = f32),
//!         ndim u8, dims (u32 each), payload (f32 LE)
//! crc32   u32               over every preceding byte
//! ```
//!
//! `load(save(x))` reproduces every tensor bit-exactly; any corruption is
//! rejected with a distinct error kind.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use darklift_core::diffusion::ScheduleConfig;
use darklift_core::rng::Rng;
use darklift_core::tensor::Param;
use darklift_core::unet::{Denoiser, UNetConfig};
use darklift_core::vae::{Vae, VaeConfig};

pub const MAGIC: [u8; 4] = *b"DLCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("unknown checkpoint kind {0}")]
    UnknownKind(u8),
    #[error("unknown tensor dtype {0}")]
    UnknownDtype(u8),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint holds unexpected tensor {0:?}")]
    UnexpectedTensor(String),
    #[error("tensor {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("config snapshot does not parse: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Vae,
    Diffusion,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Vae => 1,
            CheckpointKind::Diffusion => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self, CheckpointError> {
        match c {
            1 => Ok(CheckpointKind::Vae),
            2 => Ok(CheckpointKind::Diffusion),
            other => Err(CheckpointError::UnknownKind(other)),
        }
    }
}

/// Config snapshot stored in a VAE checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeSnapshot {
    pub vae: VaeConfig,
}

/// Config snapshot stored in a diffusion checkpoint. Includes the VAE
/// configuration the model was trained against so downstream tools can
/// check compatibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionSnapshot {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub vae: VaeConfig,
    /// Latents are multiplied by this before diffusion (and divided on the
    /// way back out), standardizing them to the sampler's Gaussian prior.
    #[serde(default = "default_latent_scale")]
    pub latent_scale: f32,
}

fn default_latent_scale() -> f32 {
    1.0
}

/// In-memory checkpoint: kind, config JSON, and the named tensor table.
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_json: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.kind.code());
        let cfg = self.config_json.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(0); // dtype f32
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 13 {
            return Err(CheckpointError::Truncated("header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader {
            bytes: &bytes[..bytes.len() - 4],
            pos: 8,
        };
        let kind = CheckpointKind::from_code(r.u8("kind")?)?;
        let cfg_len = r.u32("config length")? as usize;
        let config_json = String::from_utf8(r.take(cfg_len, "config")?.to_vec())
            .map_err(|e| CheckpointError::Malformed(format!("config not UTF-8: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|e| CheckpointError::Malformed(format!("name not UTF-8: {e}")))?;
            let dtype = r.u8("dtype")?;
            if dtype != 0 {
                return Err(CheckpointError::UnknownDtype(dtype));
            }
            let ndim = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, "tensor payload")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, shape, data));
        }
        if r.pos != r.bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after tensor table",
                r.bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            kind,
            config_json,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn tensor_table(named: Vec<(String, Param)>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    named
        .into_iter()
        .map(|(name, p)| (name, p.shape().to_vec(), p.to_vec()))
        .collect()
}

/// Bind a tensor table onto a model's named parameters; every parameter
/// must be present with the right shape, and extras are rejected.
fn bind_tensors(
    named: Vec<(String, Param)>,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<(), CheckpointError> {
    let stored: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> = tensors
        .iter()
        .map(|(n, s, d)| (n.as_str(), (s, d)))
        .collect();
    let mut wanted = BTreeMap::new();
    for (name, p) in &named {
        wanted.insert(name.as_str(), p);
    }
    for name in stored.keys() {
        if !wanted.contains_key(name) {
            return Err(CheckpointError::UnexpectedTensor(name.to_string()));
        }
    }
    for (name, p) in &named {
        let (shape, data) = stored
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if shape.as_slice() != p.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: p.shape().to_vec(),
                found: (*shape).clone(),
            });
        }
        p.set_data((*data).clone())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    Ok(())
}

/// Serialize a trained VAE.
pub fn save_vae(path: &Path, vae: &Vae) -> Result<(), CheckpointError> {
    let snapshot = VaeSnapshot {
        vae: vae.config.clone(),
    };
    Checkpoint {
        kind: CheckpointKind::Vae,
        config_json: serde_json::to_string(&snapshot)?,
        tensors: tensor_table(vae.named_params()),
    }
    .save(path)
}

/// Rebuild a VAE from a checkpoint.
pub fn load_vae(path: &Path) -> Result<Vae, CheckpointError> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != CheckpointKind::Vae {
        return Err(CheckpointError::Malformed(
            "expected a VAE checkpoint".into(),
        ));
    }
    let snapshot: VaeSnapshot = serde_json::from_str(&ckpt.config_json)?;
    let vae = Vae::new(snapshot.vae, &mut Rng::new(0))
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    bind_tensors(vae.named_params(), &ckpt.tensors)?;
    Ok(vae)
}

/// Serialize a trained denoiser together with its schedule and the VAE
/// configuration it was trained against.
pub fn save_diffusion(
    path: &Path,
    denoiser: &Denoiser,
    schedule: &ScheduleConfig,
    vae_config: &VaeConfig,
    latent_scale: f32,
) -> Result<(), CheckpointError> {
    let snapshot = DiffusionSnapshot {
        unet: denoiser.unet.config.clone(),
        schedule: *schedule,
        vae: vae_config.clone(),
        latent_scale,
    };
    Checkpoint {
        kind: CheckpointKind::Diffusion,
        config_json: serde_json::to_string(&snapshot)?,
        tensors: tensor_table(denoiser.named_params()),
    }
    .save(path)
}

/// Rebuild a denoiser from a checkpoint, returning its snapshot too.
pub fn load_diffusion(path: &Path) -> Result<(Denoiser, DiffusionSnapshot), CheckpointError> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != CheckpointKind::Diffusion {
        return Err(CheckpointError::Malformed(
            "expected a diffusion checkpoint".into(),
        ));
    }
    let snapshot: DiffusionSnapshot = serde_json::from_str(&ckpt.config_json)?;
    let denoiser = Denoiser::new(snapshot.unet.clone(), &mut Rng::new(0))
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    bind_tensors(denoiser.named_params(), &ckpt.tensors)?;
    Ok((denoiser, snapshot))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vae() -> Vae {
        let cfg = VaeConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            latent_channels: 2,
            ..VaeConfig::default()
        };
        Vae::new(cfg, &mut Rng::new(77)).unwrap()
    }

    #[test]
    fn vae_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        let vae = toy_vae();
        save_vae(&path, &vae).unwrap();
        let back = load_vae(&path).unwrap();
        for ((na, pa), (nb, pb)) in vae.named_params().iter().zip(back.named_params().iter()) {
            assert_eq!(na, nb);
            let a: Vec<u32> = pa.to_vec().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = pb.to_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "tensor {na}");
        }
    }

    #[test]
    fn diffusion_round_trip_preserves_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unet.ckpt");
        let cfg = UNetConfig {
            latent_channels: 2,
            base_channels: 8,
            channel_multipliers: vec![1],
            attention_levels: vec![0],
            time_embed_dim: 8,
            region_size: 2,
            heads: 1,
            max_timestep: 100,
        };
        let den = Denoiser::new(cfg.clone(), &mut Rng::new(3)).unwrap();
        let sched = ScheduleConfig {
            t_max: 100,
            ..ScheduleConfig::default()
        };
        let vcfg = VaeConfig::default();
        save_diffusion(&path, &den, &sched, &vcfg, 0.5).unwrap();
        let (back, snap) = load_diffusion(&path).unwrap();
        assert_eq!(snap.unet, cfg);
        assert_eq!(snap.schedule, sched);
        assert_eq!(snap.vae, vcfg);
        assert_eq!(snap.latent_scale, 0.5);
        for ((na, pa), (_, pb)) in den.named_params().iter().zip(back.named_params().iter()) {
            assert_eq!(pa.to_vec(), pb.to_vec(), "tensor {na}");
        }
    }

    #[test]
    fn corruption_yields_distinct_error_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        save_vae(&path, &toy_vae()).unwrap();
        let good = fs::read(&path).unwrap();

        // flipped payload byte -> checksum error
        let mut bad = good.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0xFF;
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(CheckpointError::Checksum { .. })
        ));

        // wrong magic
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(CheckpointError::BadMagic)
        ));

        // wrong version field, checksum fixed up so the version check fires
        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&9u32.to_le_bytes());
        let crc = crc32fast::hash(&bad[..bad.len() - 4]);
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&crc.to_le_bytes());
        match Checkpoint::decode(&bad).err() {
            Some(CheckpointError::Version { found, expected }) => {
                assert_eq!(found, 9);
                assert_eq!(expected, VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }

        // truncation
        assert!(matches!(
            Checkpoint::decode(&good[..good.len() / 3]),
            Err(CheckpointError::Checksum { .. }) | Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn binding_rejects_missing_and_mismatched_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        let vae = toy_vae();
        save_vae(&path, &vae).unwrap();
        let mut ckpt = Checkpoint::load(&path).unwrap();
        // drop a tensor
        ckpt.tensors.pop();
        ckpt.save(&path).unwrap();
        assert!(matches!(
            load_vae(&path),
            Err(CheckpointError::MissingTensor(_))
        ));
        // wrong shape
        let mut ckpt = Checkpoint {
            kind: CheckpointKind::Vae,
            config_json: serde_json::to_string(&VaeSnapshot {
                vae: vae.config.clone(),
            })
            .unwrap(),
            tensors: tensor_table(vae.named_params()),
        };
        ckpt.tensors[0].1 = vec![1, 1, 1, 1];
        ckpt.tensors[0].2 = vec![0.0];
        ckpt.save(&path).unwrap();
        assert!(matches!(
            load_vae(&path),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        save_vae(&path, &toy_vae()).unwrap();
        assert!(load_diffusion(&path).is_err());
    }
}
