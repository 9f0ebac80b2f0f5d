//! Parameter checkpoint file.
//!
//! Layout: the 8-byte magic `AVVPCKPT`, a little-endian `u64` header length,
//! a JSON header, then the payload. The header lists every parameter with its
//! ownership group, shape, and the byte offset of its values within the
//! payload. Values are little-endian `f64`, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Group, ParameterStore, Tensor};

const MAGIC: &[u8; 8] = b"AVVPCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub count: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    entries: Vec<CheckpointEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form run metadata (model configuration, epoch counter).
    pub meta: serde_json::Value,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut payload = Vec::new();
        for p in self.params.iter() {
            entries.push(CheckpointEntry {
                name: p.name().to_string(),
                group: p.group(),
                shape: p.value.shape().to_vec(),
                offset: payload.len() as u64,
                count: p.value.len() as u64,
            });
            for v in p.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            meta: self.meta.clone(),
            entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AutodiffError> {
        let bad = |msg: String| AutodiffError::Checkpoint(msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic at byte 0".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("header of {header_len} bytes runs past end of file at byte 16")))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| bad(format!("malformed header near byte {}: {e}", 16 + e.column())))?;
        if header.version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", header.version)));
        }
        let payload = &bytes[payload_start..];
        let mut params = ParameterStore::new();
        for entry in header.entries {
            let count: usize = entry.shape.iter().product();
            if count as u64 != entry.count {
                return Err(bad(format!(
                    "entry `{}` declares shape {:?} but {} values",
                    entry.name, entry.shape, entry.count
                )));
            }
            let start = entry.offset as usize;
            let end = start + count * 8;
            if end > payload.len() {
                return Err(bad(format!(
                    "entry `{}` needs payload bytes {start}..{end}, file has {}",
                    entry.name,
                    payload.len()
                )));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(entry.name, entry.group, Tensor::new(entry.shape, data)?)?;
        }
        Ok(Self {
            meta: header.meta,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), AutodiffError> {
    fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, AutodiffError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
