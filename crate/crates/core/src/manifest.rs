//! Run manifests: enough recorded state to repeat a command exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file, keyed by role.
    pub dataset_hashes: BTreeMap<String, String>,
    pub solver: Option<String>,
    pub version: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config,
            seeds: BTreeMap::new(),
            dataset_hashes: BTreeMap::new(),
            solver: None,
            version: VERSION.into(),
            started_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_seconds: 0.0,
            outputs: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn hash_input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.dataset_hashes.insert(role.into(), sha256_file(path)?);
        Ok(())
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = RunManifest::new("synth", serde_json::json!({"seed": 7}));
        m.write_atomic(&p).unwrap();
        m.write_atomic(&p).unwrap();
        let back: RunManifest = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(!dir.path().join("m.json.tmp").exists());
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
