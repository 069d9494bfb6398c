//! Versioned binary model container.
//!
//! Layout (all integers and floats little-endian):
//!
//! | offset | size | content |
//! |---|---|---|
//! | 0 | 8 | magic `DSMRCKPT` |
//! | 8 | 4 | format version, `u32` (currently 1) |
//! | 12 | 4 | header length `H`, `u32` |
//! | 16 | `H` | UTF-8 JSON header: `model`, `norm`, `dtype`, `n_params`, `n_running`, `adam_step` |
//! | 16 + H | 4 * n_params | learnable parameters, `f32` |
//! | ... | 4 * n_running | batch-norm running mean and variance, `f32` |
//! | ... | 8 * n_params | Adam first then second moments, `f32`, only if `adam_step` is not null |
//! | end - 4 | 4 | CRC-32 of every preceding byte, `u32` |
//!
//! Parameter order follows the network: encoder levels top-down (conv
//! weights, conv bias, batch-norm scale, shift), decoder levels bottom-up
//! (conv, batch norm, transposed conv, batch norm), then the output conv.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_weights, UNetConfig, WeightSet};
use crate::normalization::NormStats;
use crate::training::AdamState;

pub const MAGIC: &[u8; 8] = b"DSMRCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training or to refine a DSM.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: WeightSet<f32>,
    pub norm: NormStats,
    pub adam: Option<AdamState<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: UNetConfig,
    norm: NormStats,
    dtype: String,
    n_params: usize,
    n_running: usize,
    adam_step: Option<u64>,
}

impl Checkpoint {
    pub fn new(weights: WeightSet<f32>, norm: NormStats) -> Checkpoint {
        Checkpoint { weights, norm, adam: None }
    }

    /// Untrained model whose output equals its input DSM.
    pub fn identity(config: &UNetConfig, norm: NormStats, seed: u64) -> Result<Checkpoint> {
        Ok(Checkpoint::new(init_weights(config, seed)?, norm))
    }

    pub fn config(&self) -> &UNetConfig {
        self.weights.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: *self.config(),
            norm: self.norm,
            dtype: "f32".into(),
            n_params: self.weights.params().len(),
            n_running: self.weights.running().len(),
            adam_step: self.adam.as_ref().map(|a| a.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(24 + json.len() + 4 * (3 * header.n_params + header.n_running));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f32]| xs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        put(self.weights.params());
        put(self.weights.running());
        if let Some(a) = &self.adam {
            put(&a.m);
            put(&a.v);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let json = body.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
        }
        let mut rest = &body[16 + hlen..];
        let mut take = |n: usize| -> Result<Vec<f32>> {
            if rest.len() < 4 * n {
                return Err(bad("truncated payload"));
            }
            let (head, tail) = rest.split_at(4 * n);
            rest = tail;
            Ok(head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
        };
        let params = take(header.n_params)?;
        let running = take(header.n_running)?;
        let adam = match header.adam_step {
            Some(step) => Some(AdamState { m: take(header.n_params)?, v: take(header.n_params)?, step }),
            None => None,
        };
        if !rest.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        header.norm.validate()?;
        let weights = WeightSet::from_parts(header.model, params, running)?;
        Ok(Checkpoint { weights, norm: header.norm, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Variant;

    fn ckpt(adam: bool) -> Checkpoint {
        let cfg = UNetConfig { input_channels: 2, depth: 2, base_filters: 4, max_filters: 8, tile: 8 };
        let mut w = init_weights::<f32>(&cfg, 5).unwrap();
        w.params_mut()[3] = 0.25;
        let n = w.params().len();
        let adam = adam.then(|| AdamState { m: vec![0.5; n], v: vec![0.125; n], step: 17 });
        Checkpoint { weights: w, norm: NormStats::dsm_only(3.5).unwrap(), adam }
    }

    #[test]
    fn roundtrip_with_and_without_optimizer() {
        for with_adam in [false, true] {
            let c = ckpt(with_adam);
            assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = ckpt(true).to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"DSMRCKPT").is_err());
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = ckpt(false).to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"DSMRCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let c = Checkpoint::identity(&UNetConfig::small(Variant::Stereo), NormStats::dsm_only(1.0).unwrap(), 0).unwrap();
        assert!(c.weights.head().iter().all(|&v| v == 0.0));
    }
}
