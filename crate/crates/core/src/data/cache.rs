//! Binary dataset cache.
//!
//! ```text
//! magic    8 bytes  "CPFTDSET"
//! version  u32
//! |V|      u64
//! dropped  u64
//! users    u64
//! then per user: id u64, length u32, items u32 * length
//! ```
//! All integers little-endian.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::types::{InteractionSequence, ItemId};

pub const DATASET_MAGIC: &[u8; 8] = b"CPFTDSET";
pub const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.catalog_size() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dropped() as u64).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for s in self.sequences() {
            out.extend_from_slice(&s.user.to_le_bytes());
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            for it in &s.items {
                out.extend_from_slice(&it.0.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_owned(),
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| bad("truncated"))? != DATASET_MAGIC {
            return Err(bad("not a dataset cache (bad magic)"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated"))?;
        if version != DATASET_VERSION {
            return Err(bad(&format!("unsupported dataset version {version}")));
        }
        let catalog = cur.u64().ok_or_else(|| bad("truncated"))? as usize;
        let dropped = cur.u64().ok_or_else(|| bad("truncated"))? as usize;
        let n = cur.u64().ok_or_else(|| bad("truncated"))? as usize;
        let mut seqs = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let user = cur.u64().ok_or_else(|| bad("truncated"))?;
            let len = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
            let mut items = Vec::with_capacity(len);
            for _ in 0..len {
                items.push(ItemId(cur.u32().ok_or_else(|| bad("truncated"))?));
            }
            seqs.push(InteractionSequence { user, items });
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Dataset::with_dropped(seqs, catalog, dropped)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset.to_bytes())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    Dataset::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn cache_round_trip(seed in 0u64..1000, users in 1usize..40) {
            let spec = SynthSpec { n_users: users, n_items: 17, seed, ..SynthSpec::default() };
            let d = generate_synthetic(&spec).unwrap();
            let back = Dataset::from_bytes(&d.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, d);
        }
    }

    #[test]
    fn rejects_truncation() {
        let d = generate_synthetic(&SynthSpec { n_users: 3, ..SynthSpec::default() }).unwrap();
        let bytes = d.to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }
}
