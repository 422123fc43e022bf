//! Versioned binary checkpoint container.
//!
//! Layout: magic, `u32` format version, `u32` header length, JSON header,
//! raw little-endian `f32` parameter blobs in header order, then a SHA-256
//! digest of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Stage;
use crate::error::{Error, Result};
use crate::model::{IdPatchModel, ModelConfig};
use crate::nn::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"IDPATCH\x01";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    model: ModelConfig,
    stage: Stage,
    step: u64,
    seed: u64,
    signature: String,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub stage: Stage,
    pub step: u64,
    pub seed: u64,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.model.hash()
    }

    /// Module layout with this checkpoint's values.
    pub fn instantiate(&self) -> Result<IdPatchModel> {
        let (model, store) = IdPatchModel::layout(&self.model)?;
        if store.signature() != self.params.signature() {
            return Err(Error::CheckpointCorrupt(format!(
                "parameter layout {} does not match the configured model {}",
                self.params.signature(),
                store.signature()
            )));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash(),
            model: self.model.clone(),
            stage: self.stage,
            step: self.step,
            seed: self.seed,
            signature: self.params.signature(),
            params: self.params.iter().map(|(_, n, t)| ParamEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + self.params.num_scalars() * 4 + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CheckpointCorrupt(m.to_string());
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version > FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, supported: FORMAT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header overruns file"))?;
        let header: Header = serde_json::from_slice(&body[16..hend]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let mut params = ParamStore::new();
        let mut off = hend;
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let end = off + 4 * n;
            if end > body.len() {
                return Err(corrupt("parameter data truncated"));
            }
            let data = body[off..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            params.add(p.name.clone(), Tensor::new(p.shape.clone(), data));
            off = end;
        }
        if off != body.len() {
            return Err(corrupt("trailing bytes after parameters"));
        }
        if params.signature() != header.signature {
            return Err(corrupt("parameter signature mismatch"));
        }
        Ok(Self { model: header.model, stage: header.stage, step: header.step, seed: header.seed, params })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn ckpt() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a", Tensor::new([2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]));
        params.add("b", Tensor::new([3], vec![1e-30, 7.0, -2.25]));
        Checkpoint { model: ModelConfig::default(), stage: Stage::One, step: 12, seed: 4, params }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = ckpt();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.params.value_hash(), c.params.value_hash());
        for ((_, na, a), (_, nb, b)) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!((back.stage, back.step, back.seed), (Stage::One, 12, 4));
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let bytes = ckpt().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 20, 3] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CheckpointCorrupt(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CheckpointCorrupt(_))));
    }

    #[test]
    fn newer_version_is_rejected_explicitly() {
        let mut bytes = ckpt().to_bytes();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::CheckpointVersion { found, supported }) => assert_eq!((found, supported), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
