//! Self-describing training checkpoints.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! [0..8)    magic  "PKICKPT\0"
//! [8..12)   format version (currently 1)
//! [12..20)  header length in bytes
//! [..]      JSON header: model config, step, RNG seed and stream position,
//!           tensor manifest (name + shape, in payload order)
//! [..]      payload: tensor data as raw f64, row-major, manifest order
//! [-32..]   SHA-256 over everything before it
//! ```
//!
//! The trailing hash makes corruption loud: any flipped byte fails loading
//! rather than thawing a subtly different model. Only the trainable tensors
//! are stored — frozen parameters are reproducible from the config alone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PKICKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    seed: u64,
    /// ChaCha word position split into (low, high) halves.
    rng_word_pos: (u64, u64),
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

/// A thawed checkpoint: everything needed to resume a run exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub rng_word_pos: u128,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot the trainable state of `model`.
    pub fn from_model(model: &Model, step: u64, seed: u64, rng_word_pos: u128) -> Checkpoint {
        Checkpoint {
            config: model.cfg.clone(),
            step,
            seed,
            rng_word_pos,
            tensors: model
                .named_trainable()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
            rng_word_pos: (self.rng_word_pos as u64, (self.rng_word_pos >> 64) as u64),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorMeta {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let hash = Sha256::digest(&buf);
        buf.extend_from_slice(&hash);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
            return Err(fail("file too short to be a checkpoint"));
        }
        let (body, stored_hash) = bytes.split_at(bytes.len() - 32);
        let hash = Sha256::digest(body);
        if hash.as_slice() != stored_hash {
            return Err(fail("checksum mismatch - the file is corrupt"));
        }
        if &body[..8] != MAGIC {
            return Err(fail("bad magic - not a checkpoint file"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let payload_start = 20 + header_len;
        if payload_start > body.len() {
            return Err(fail("header length exceeds the file"));
        }
        let header: Header = serde_json::from_slice(&body[20..payload_start])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

        let payload = &body[payload_start..];
        let expect: usize = header
            .tensors
            .iter()
            .map(|m| m.shape.iter().product::<usize>() * 8)
            .sum();
        if payload.len() != expect {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, manifest requires {expect}",
                payload.len()
            )));
        }

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut off = 0;
        for meta in &header.tensors {
            let n: usize = meta.shape.iter().product();
            let data: Vec<f64> = payload[off..off + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += n * 8;
            tensors.push((meta.name.clone(), Tensor::from_vec(&meta.shape, data)?));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            seed: header.seed,
            rng_word_pos: (header.rng_word_pos.0 as u128)
                | ((header.rng_word_pos.1 as u128) << 64),
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Write the stored tensors into `model`'s trainable slots, by name.
    /// The model must have been built from the same structural config.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        if self.config != model.cfg {
            return Err(Error::Checkpoint(
                "checkpoint config does not match the target model".into(),
            ));
        }
        let mut slots = model.named_trainable_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {} trainable slots",
                self.tensors.len(),
                slots.len()
            )));
        }
        for ((sname, slot), (cname, stored)) in slots.iter_mut().zip(&self.tensors) {
            if sname != cname {
                return Err(Error::Checkpoint(format!(
                    "tensor order mismatch: model slot {sname}, checkpoint {cname}"
                )));
            }
            if slot.shape() != stored.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {sname}: shape {:?} vs {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            **slot = stored.clone();
        }
        Ok(())
    }

    /// One human-readable line per stored field, for inspection tooling.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "step {}  seed {}  rng word pos {}\n",
            self.step, self.seed, self.rng_word_pos
        ));
        let total: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        out.push_str(&format!(
            "{} trainable tensors, {total} scalars\n",
            self.tensors.len()
        ));
        for (n, t) in &self.tensors {
            out.push_str(&format!("  {n}  {:?}\n", t.shape()));
        }
        out
    }
}
