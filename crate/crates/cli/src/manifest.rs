use std::fs;
use std::path::{Path, PathBuf};

use cyclecap::config::Config;
use cyclecap::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub hash: String,
}

/// Everything needed to repeat a run: the parsed command, the resolved
/// configuration and content hashes of every input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: Command,
    pub config: Config,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub inputs: Vec<InputFile>,
    pub input_hash: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a blob framed the way git frames objects: `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

pub fn hash_inputs(paths: &[PathBuf]) -> Result<(Vec<InputFile>, String)> {
    let mut files = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        files.push(InputFile {
            path: p.display().to_string(),
            hash: blob_hash(&bytes),
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    files.dedup_by(|a, b| a.path == b.path);
    let listing: String = files.iter().map(|f| format!("{} {}\n", f.hash, f.path)).collect();
    Ok((files, blob_hash(listing.as_bytes())))
}

impl RunManifest {
    pub fn new(command: Command, config: Config, out_dir: &Path, inputs: &[PathBuf]) -> Result<Self> {
        let (inputs, input_hash) = hash_inputs(inputs)?;
        Ok(RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            command,
            config,
            out_dir: out_dir.to_path_buf(),
            inputs,
            input_hash,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Inputs whose current content differs from the recorded hash.
    pub fn changed_inputs(&self) -> Result<Vec<String>> {
        let mut changed = Vec::new();
        for f in &self.inputs {
            let now = fs::read(&f.path).map(|b| blob_hash(&b));
            if now.ok().as_deref() != Some(f.hash.as_str()) {
                changed.push(f.path.clone());
            }
        }
        Ok(changed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_known_value() {
        // sha256 of "blob 0\0"
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn input_hash_ignores_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        fs::write(&a, "x").unwrap();
        fs::write(&b, "y").unwrap();
        let (_, h1) = hash_inputs(&[a.clone(), b.clone()]).unwrap();
        let (_, h2) = hash_inputs(&[b, a]).unwrap();
        assert_eq!(h1, h2);
    }
}
