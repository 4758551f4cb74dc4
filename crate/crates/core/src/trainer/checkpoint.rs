//! Checkpoint format.
//!
//! Layout: magic `CLCK`, version u32, config hash (sha256 of the embedded
//! config JSON), the config JSON itself, epoch, RNG snapshot, per-network
//! Adam step counters, then a sorted table of named tensors (parameters
//! and optimizer moments) in the raw tensor format. Everything is ordered,
//! so identical state produces identical bytes and save/load/save is
//! byte-exact.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainError;
use crate::tensor::{read_blob, write_blob, TensorBlob};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized ChaCha state: seed, stream, and position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Full training state at an epoch boundary: parameters, optimizer
/// moments and step counters, RNG position, and the originating config.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_json: String,
    pub epoch: u64,
    pub rng: RngSnapshot,
    /// Adam step counter per network prefix ("G1", "F1", "D00", ...).
    pub opt_steps: BTreeMap<String, u64>,
    /// Parameters under "<net>/<param>", moments under
    /// "adam/<net>/<param>/m" and ".../v".
    pub tensors: BTreeMap<String, TensorBlob>,
}

pub fn config_hash(config_json: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(config_json.as_bytes());
    h.finalize().into()
}

impl Checkpoint {
    pub fn config_hash(&self) -> [u8; 32] {
        config_hash(&self.config_json)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash());
        let cfg = self.config_json.as_bytes();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.opt_steps.len() as u32).to_le_bytes());
        for (name, step) in &self.opt_steps {
            write_str(&mut out, name);
            out.extend_from_slice(&step.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (key, t) in &self.tensors {
            write_str(&mut out, key);
            write_blob(&mut out, t).expect("vec write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
        let mut r = bytes;
        let bad = |msg: &str| TrainError::CheckpointFormat(msg.to_string());

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad checkpoint magic"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::CheckpointFormat(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash).map_err(|_| bad("truncated hash"))?;
        let cfg_len = read_u64(&mut r)? as usize;
        if r.len() < cfg_len {
            return Err(bad("truncated config"));
        }
        let config_json = String::from_utf8(r[..cfg_len].to_vec())
            .map_err(|_| bad("config is not utf-8"))?;
        r = &r[cfg_len..];
        if config_hash(&config_json) != hash {
            return Err(bad("config hash mismatch"));
        }
        let epoch = read_u64(&mut r)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(|_| bad("truncated rng seed"))?;
        let stream = read_u64(&mut r)?;
        let word_pos = read_u128(&mut r)?;

        let n_steps = read_u32(&mut r)? as usize;
        let mut opt_steps = BTreeMap::new();
        for _ in 0..n_steps {
            let name = read_str(&mut r)?;
            opt_steps.insert(name, read_u64(&mut r)?);
        }
        let n_tensors = read_u32(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let key = read_str(&mut r)?;
            let t = read_blob(&mut r)
                .map_err(|e| TrainError::CheckpointFormat(format!("tensor {key}: {e}")))?;
            tensors.insert(key, t);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            config_json,
            epoch,
            rng: RngSnapshot { seed, stream, word_pos },
            opt_steps,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| TrainError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let bytes = std::fs::read(path)
            .map_err(|e| TrainError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_bytes(&bytes)
    }

    /// sha256 of the serialized bytes, hex-encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_bytes());
        let d: [u8; 32] = h.finalize().into();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_u32(r: &mut &[u8]) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| TrainError::CheckpointFormat("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| TrainError::CheckpointFormat("truncated u64".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_u128(r: &mut &[u8]) -> Result<u128, TrainError> {
    let mut b = [0u8; 16];
    r.read_exact(&mut b).map_err(|_| TrainError::CheckpointFormat("truncated u128".into()))?;
    Ok(u128::from_le_bytes(b))
}

fn read_str(r: &mut &[u8]) -> Result<String, TrainError> {
    let len = read_u32(r)? as usize;
    if r.len() < len {
        return Err(TrainError::CheckpointFormat("truncated string".into()));
    }
    let s = String::from_utf8(r[..len].to_vec())
        .map_err(|_| TrainError::CheckpointFormat("non-utf8 string".into()))?;
    *r = &r[len..];
    Ok(s)
}
