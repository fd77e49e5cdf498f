//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes      | content                                   |
//! |------------|-------------------------------------------|
//! | 8          | magic `OSMOSCKP`                          |
//! | 4          | format version (`u32`)                    |
//! | 8          | header length `n` (`u64`)                 |
//! | n          | UTF-8 JSON [`CheckpointHeader`]           |
//! | 4·count    | parameters as `f32`                       |
//!
//! The header records the parameter count and the SHA-256 of the
//! parameter bytes, both checked on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{ToyUNet, ToyUNetConfig};
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OSMOSCKP";
pub const FORMAT_VERSION: u32 = 1;

/// How the weights were produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Mean `l_simple` over the last logged window.
    pub final_l_simple: f64,
    /// Description of the training data.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub unet: ToyUNetConfig,
    pub schedule: ScheduleParams,
    pub meta: TrainingMeta,
    pub param_count: usize,
    pub params_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub schedule: ScheduleParams,
    pub meta: TrainingMeta,
    pub model: ToyUNet<f32>,
}

fn param_bytes(params: &[f32]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = param_bytes(self.model.params());
        let header = CheckpointHeader {
            unet: self.model.config().clone(),
            schedule: self.schedule,
            meta: self.meta.clone(),
            param_count: self.model.param_count(),
            params_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not an osmosis checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let end = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_add(20))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[20..end]).map_err(|e| bad(format!("bad header: {e}")))?;
        let payload = &bytes[end..];
        if payload.len() != header.param_count.saturating_mul(4) {
            return Err(bad(format!(
                "expected {} parameters, found {} bytes",
                header.param_count,
                payload.len()
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.params_sha256 {
            return Err(bad("parameter checksum mismatch"));
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let model = ToyUNet::from_params(header.unet, params)?;
        Ok(Self {
            schedule: header.schedule,
            meta: header.meta,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ToyUNetConfig {
            channels: 8,
            max_groups: 4,
            init_seed: 5,
            ..ToyUNetConfig::default()
        };
        let mut model = ToyUNet::<f32>::new(cfg).unwrap();
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            *p += (i as f32 * 0.37).sin() * 1e-3;
        }
        Checkpoint {
            schedule: ScheduleParams::compressed(250),
            meta: TrainingMeta {
                steps: 12,
                batch_size: 4,
                seed: 3,
                learning_rate: 2e-4,
                final_l_simple: 0.1234567890123,
                data: "synthetic".into(),
            },
            model,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.schedule, ck.schedule);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.model.config(), ck.model.config());
        let bits = |m: &ToyUNet<f32>| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.model), bits(&ck.model));
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..30]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
