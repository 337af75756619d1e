//! Run manifests: config snapshot, seed, and content hashes of every file a
//! command produced, sufficient to reproduce the run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub created_utc: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            created_utc: chrono::Utc::now().to_rfc3339(),
            seed,
            config,
            artifacts: Vec::new(),
        }
    }

    /// Records a produced file with its content hash.
    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let meta = fs::metadata(path)
            .with_context(|| format!("stat {}", path.display()))?;
        self.artifacts.push(ArtifactEntry {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
            bytes: meta.len(),
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
