//! Run manifests and output directory handling.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::store::{read_json, to_json, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of one output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Every setting the command used, defaults included.
    pub config: serde_json::Value,
    pub config_hash: String,
    /// SHA-256 of the input data file.
    pub data_hash: String,
    pub seed: u64,
    pub engine_version: String,
    pub started_at: u64,
    pub finished_at: u64,
}

impl RunManifest {
    pub fn begin<C: Serialize>(
        command: &str,
        config: &C,
        data_hash: String,
        seed: u64,
    ) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(RunManifest {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_hash: sha256_hex(to_json(&config)?.as_bytes()),
            config,
            data_hash,
            seed,
            engine_version: env!("CARGO_PKG_VERSION").into(),
            started_at: unix_now(),
            finished_at: 0,
        })
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_at = unix_now();
        write_json(&dir.join(MANIFEST_FILE), &self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Creates `dir` for a fresh run. An existing non-empty directory is only
/// cleared with `force`.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            bail!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            );
        }
        if occupied {
            fs::remove_dir_all(dir).with_context(|| format!("cannot clear {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::begin("synth", &serde_json::json!({"a": 1}), "00".into(), 3).unwrap();
        let hash = m.config_hash.clone();
        m.finish(dir.path()).unwrap();
        let back = RunManifest::load(dir.path()).unwrap();
        assert_eq!(back.config_hash, hash);
        assert_eq!(back.config["a"], 1);
        assert!(back.finished_at >= back.started_at);
    }

    #[test]
    fn existing_output_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        prepare_output(&out, false).unwrap();
        prepare_output(&out, false).unwrap();
        fs::write(out.join("x"), "1").unwrap();
        assert!(prepare_output(&out, false).is_err());
        prepare_output(&out, true).unwrap();
        assert!(!out.join("x").exists());
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
