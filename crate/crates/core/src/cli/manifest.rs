use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of_bytes(name: &str, bytes: &[u8]) -> Self {
        Self {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }

    pub fn of_file(path: &Path) -> Result<Self> {
        Self::of_file_named(path, &path.to_string_lossy())
    }

    pub fn of_file_named(path: &Path, name: &str) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::of_bytes(name, &bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub verb: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    /// Effective configuration after defaults, file and overrides.
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub out_dir: String,
    pub created: String,
}

impl Manifest {
    pub fn new(
        verb: &str,
        argv: Vec<String>,
        config: BTreeMap<String, String>,
        seed: u64,
        inputs: Vec<FileHash>,
        out_dir: &Path,
    ) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            verb: verb.to_string(),
            argv,
            config,
            seed,
            inputs,
            outputs: Vec::new(),
            out_dir: out_dir.to_string_lossy().into_owned(),
            created: chrono::Local::now().to_rfc3339(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("manifest: {e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let h = FileHash::of_bytes("x", b"abc");
        assert_eq!(h.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("evaluate", vec!["evaluate".into()], BTreeMap::new(), 3, vec![], dir.path());
        m.outputs.push(FileHash::of_bytes("r", b""));
        let p = dir.path().join("manifest.json");
        m.write(&p).unwrap();
        assert_eq!(Manifest::read(&p).unwrap(), m);
    }
}
