//! Binary checkpoint format.
//!
//! ```text
//! "TMAE"            4 bytes magic
//! version           u32 little-endian (= 1)
//! header_len        u64 little-endian
//! header            JSON, header_len bytes
//! payload           f32 little-endian tensors at the offsets in the header
//! ```
//!
//! Values are stored as `f32`: saving rounds each `f64` to the nearest `f32`
//! and loading widens exactly, so `save ∘ load ∘ save` is byte-stable while a
//! first save of arbitrary `f64` state loses the low mantissa bits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::dataset::sha256_hex;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{AdamHyper, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TMAE";
pub const FORMAT_VERSION: u32 = 1;

/// Where the run's random streams resume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f64>,
    pub adam: AdamState<f64>,
    pub adam_hyper: AdamHyper,
    pub epoch: usize,
    pub rng: RngState,
    /// Class ids of the training set, in logit order.
    pub classes: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    config_hash: String,
    epoch: usize,
    adam_step: u64,
    adam_hyper: AdamHyper,
    rng: RngState,
    classes: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

pub fn config_hash(cfg: &ModelConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Tensors in file order: parameters, then first and second moments.
    fn named_tensors(&self) -> Vec<(String, &Tensor<f64>)> {
        let names = self.params.specs.iter().map(|s| s.name.clone());
        let p = names.clone().zip(&self.params.tensors);
        let m = names.clone().map(|n| format!("adam.m.{n}")).zip(&self.adam.m);
        let v = names.map(|n| format!("adam.v.{n}")).zip(&self.adam.v);
        p.chain(m).chain(v).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.named_tensors() {
            entries.push(TensorEntry { name, shape: t.shape().to_vec(), offset: payload.len() });
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.params.config.clone(),
            config_hash: config_hash(&self.params.config),
            epoch: self.epoch,
            adam_step: self.adam.step,
            adam_hyper: self.adam_hyper,
            rng: self.rng,
            classes: self.classes.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing TMAE magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_bytes = bytes.get(16..16 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        if header.format_version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        if config_hash(&header.model) != header.config_hash {
            return Err(bad("config hash mismatch"));
        }
        let payload = &bytes[16 + header_len..];

        let skeleton = ModelParams::<f64>::init(&header.model, 0)?;
        let n = skeleton.specs.len();
        if header.tensors.len() != 3 * n {
            return Err(bad(format!("expected {} tensors, found {}", 3 * n, header.tensors.len())));
        }
        let mut tensors = Vec::with_capacity(3 * n);
        for (i, entry) in header.tensors.iter().enumerate() {
            let spec = &skeleton.specs[i % n];
            let expected = match i / n {
                0 => spec.name.clone(),
                1 => format!("adam.m.{}", spec.name),
                _ => format!("adam.v.{}", spec.name),
            };
            if entry.name != expected || entry.shape != spec.shape {
                return Err(bad(format!(
                    "tensor {i}: found {} {:?}, expected {expected} {:?}",
                    entry.name, entry.shape, spec.shape
                )));
            }
            let count: usize = entry.shape.iter().product();
            let raw = payload
                .get(entry.offset..entry.offset + 4 * count)
                .ok_or_else(|| bad(format!("payload too short for {}", entry.name)))?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push(Tensor::new(entry.shape.clone(), data)?);
        }
        let v = tensors.split_off(2 * n);
        let m = tensors.split_off(n);
        let params = ModelParams::from_tensors(header.model, tensors)?;
        Ok(Self {
            params,
            adam: AdamState { step: header.adam_step, m, v },
            adam_hyper: header.adam_hyper,
            epoch: header.epoch,
            rng: header.rng,
            classes: header.classes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Content hash of the serialized checkpoint.
    pub fn id(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// The state as it reads back after a save (values rounded to `f32`).
    pub fn quantized(&self) -> Result<Self> {
        Self::from_bytes(&self.to_bytes()?)
    }

    /// Header fields plus per-parameter L2 norms, for inspection.
    pub fn summary(&self) -> serde_json::Value {
        let norms: Vec<serde_json::Value> = self
            .params
            .specs
            .iter()
            .zip(&self.params.tensors)
            .map(|(s, t)| serde_json::json!({ "name": s.name, "shape": s.shape, "l2_norm": t.norm() }))
            .collect();
        serde_json::json!({
            "format_version": FORMAT_VERSION,
            "model": self.params.config,
            "config_hash": config_hash(&self.params.config),
            "param_count": self.params.param_count(),
            "epoch": self.epoch,
            "adam_step": self.adam.step,
            "adam_hyper": self.adam_hyper,
            "rng": self.rng,
            "classes": self.classes,
            "parameters": norms,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { enc_depth: 1, dec_depth: 1, n_classes: 3, ..ModelConfig::default() };
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let adam = AdamState::zeros_like(&params.tensors);
        Checkpoint {
            params,
            adam,
            adam_hyper: AdamHyper::default(),
            epoch: 2,
            rng: RngState { seed: 5, next_epoch: 2 },
            classes: vec![0, 1, 2],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample();
        let first = ck.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&first).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), first);
        assert_eq!(loaded.epoch, 2);
        assert_eq!(loaded.classes, vec![0, 1, 2]);
        // f32-representable state survives exactly.
        assert_eq!(Checkpoint::from_bytes(&loaded.to_bytes().unwrap()).unwrap(), loaded);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_config_hash_mismatch() {
        let bytes = sample().to_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        let tampered = header.replacen("\"n_classes\":3", "\"n_classes\":4", 1);
        assert_eq!(tampered.len(), header.len());
        let mut out = bytes[..16].to_vec();
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        let err = Checkpoint::from_bytes(&out).unwrap_err();
        assert!(err.to_string().contains("hash"), "{err}");
    }
}
