//! Binary checkpoint: fixed header followed by little-endian `f64` tensors
//! in layout order (embeddings, then encoder weights).
//!
//! ```text
//! magic    8 bytes  "CPFTCKPT"
//! version  u32
//! |V|      u64
//! d        u64
//! encoder  u8       0 = gru, 1 = mean_pool
//! params   f64 * n
//! ```

use std::fs;
use std::path::Path;

use super::{EncoderKind, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CPFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 1;

impl ModelParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.catalog_size() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        out.push(self.kind().tag());
        for v in self.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_owned(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let catalog = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let kind = EncoderKind::from_tag(bytes[28]).ok_or_else(|| bad("unknown encoder tag"))?;
        let body = &bytes[HEADER_LEN..];
        let expected = ModelParams::num_params_for(kind, catalog, dim);
        if body.len() != expected * 8 {
            return Err(bad(&format!(
                "expected {expected} parameters, found {} bytes",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ModelParams::from_parts(kind, catalog, dim, data)
    }
}

pub fn write_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, params.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    ModelParams::from_bytes(&bytes, path)
}
