//! Binary model checkpoints.
//!
//! Layout: magic `MPR1`, u32 LE format version, u64 LE header length, a
//! UTF-8 JSON header `{"config", "vocab", "tensors"}` and then the tensor
//! payload as little-endian f32. `tensors` maps each parameter name to
//! `{"shape", "dtype", "offset", "frozen"}` with `offset` in bytes from the
//! start of the payload.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 4] = b"MPR1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    tensors: BTreeMap<String, TensorEntry>,
}

pub fn to_bytes(state: &ModelState) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (spec, t) in state.named() {
        tensors.insert(
            spec.name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                frozen: !t.requires_grad(),
            },
        );
        offset += 4 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: state.config.clone(),
        vocab: state.vocab.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in state.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint; `path` is only used in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let bad = |reason: String| Error::Checkpoint {
        path: PathBuf::from(path),
        reason,
    };
    if bytes.len() < 16 {
        return Err(bad(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload_start = 16u64
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| bad("truncated header".into()))? as usize;
    let header: Header =
        serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[payload_start..];

    let layout = crate::model::Layout::new(&header.config);
    let mut tensors = Vec::with_capacity(layout.len());
    let mut expected = 0u64;
    for spec in layout.specs() {
        let entry = header
            .tensors
            .get(&spec.name)
            .ok_or_else(|| bad(format!("missing tensor `{}`", spec.name)))?;
        if entry.dtype != "f32" {
            return Err(bad(format!("tensor `{}` has dtype {}", spec.name, entry.dtype)));
        }
        if entry.shape != spec.shape {
            return Err(bad(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                spec.name, entry.shape, spec.shape
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(4 * n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| bad(format!("truncated payload for `{}`", spec.name)))?;
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        expected += 4 * n as u64;
        tensors.push(Tensor::new(entry.shape.clone(), data)?.with_requires_grad(!entry.frozen));
    }
    if header.tensors.len() != layout.len() {
        return Err(bad(format!(
            "{} tensors in header, model has {}",
            header.tensors.len(),
            layout.len()
        )));
    }
    if payload.len() as u64 != expected {
        return Err(bad(format!("payload is {} bytes, expected {expected}", payload.len())));
    }
    ModelState::from_tensors(header.config, header.vocab, tensors).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    let bytes = to_bytes(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests_support::tiny_state;

    fn roundtrip_state() -> ModelState {
        let mut s: ModelState = tiny_state(9);
        // Perturb a value so the check is not just about init.
        s.tensors_mut()[0].data_mut()[0] = f32::from_bits(0x3f80_0001);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = roundtrip_state();
        let bytes = to_bytes(&s).unwrap();
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.config, s.config);
        assert_eq!(back.vocab, s.vocab);
        for (a, b) in s.tensors().iter().zip(back.tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
            assert_eq!(a.requires_grad(), b.requires_grad());
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&roundtrip_state()).unwrap();
        let p = Path::new("x.ckpt");
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic, p).unwrap_err().to_string().contains("magic"));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(from_bytes(&bad_version, p).unwrap_err().to_string().contains("version"));
        assert!(from_bytes(&bytes[..bytes.len() - 4], p).is_err());
        assert!(from_bytes(&bytes[..20], p).is_err());
        assert!(from_bytes(&bytes[..3], p).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        assert!(from_bytes(&extra, p).is_err());
    }
}
