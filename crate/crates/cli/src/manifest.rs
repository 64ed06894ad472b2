//! Run manifest: configuration echo, code version, seed, and a content hash
//! for every artifact the command wrote. Deterministic byte-for-byte given
//! the same configuration and seed; wall-clock timing goes to stderr only.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Config,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(command: &str, config: &Config) -> Manifest {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            files: Vec::new(),
        }
    }

    pub fn record(&mut self, dir: &Path, name: &str) -> anyhow::Result<()> {
        let path = dir.join(name);
        let data = std::fs::read(&path)?;
        let mut hasher = Sha256::new();
        hasher.update(&data);
        self.files.push(FileEntry {
            name: name.to_string(),
            bytes: data.len() as u64,
            sha256: format!("{:x}", hasher.finalize()),
        });
        Ok(())
    }

    pub fn write(&mut self, dir: &Path) -> anyhow::Result<PathBuf> {
        self.files.sort_by(|a, b| a.name.cmp(&b.name));
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// Write a file and record it in the manifest in one motion.
pub fn emit(
    manifest: &mut Manifest,
    dir: &Path,
    name: &str,
    contents: &[u8],
) -> anyhow::Result<()> {
    std::fs::write(dir.join(name), contents)?;
    manifest.record(dir, name)
}
