//! Run manifests: the record that makes a finished output directory
//! self-describing and guards it against accidental overwrites.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

/// What produced the contents of an output directory: the command, the
/// config it ran under (path and content hash), the seeds involved, and a
/// checksum per written artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_sha256: Option<String>,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub artifacts: Vec<ArtifactRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

/// Refuse to touch a directory that already holds a finished run unless the
/// caller passed `--force`.
pub fn guard_out_dir(out_dir: &Path, force: bool) -> Result<(), CliError> {
    let path = manifest_path(out_dir);
    if path.exists() && !force {
        return Err(CliError::usage(format!(
            "{} already holds a run manifest; pass --force to overwrite",
            out_dir.display()
        )));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", out_dir.display())))?;
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str, out_dir: &Path, seeds: &[u64]) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config_path: None,
            config_sha256: None,
            seeds: seeds.to_vec(),
            out_dir: out_dir.display().to_string(),
            artifacts: Vec::new(),
        }
    }

    pub fn with_config(mut self, path: Option<&Path>, bytes: Option<&[u8]>) -> RunManifest {
        self.config_path = path.map(|p| p.display().to_string());
        self.config_sha256 = bytes.map(sha256_hex);
        self
    }

    /// Record one artifact already written inside the output directory.
    pub fn record(&mut self, out_dir: &Path, name: &str) -> Result<(), CliError> {
        let path = out_dir.join(name);
        let bytes = fs::read(&path)
            .map_err(|e| CliError::usage(format!("cannot read back {}: {e}", path.display())))?;
        self.artifacts.push(ArtifactRecord {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::usage(format!("cannot serialise manifest: {e}")))?;
        fs::write(manifest_path(out_dir), text)
            .map_err(|e| CliError::usage(format!("cannot write manifest: {e}")))?;
        Ok(())
    }
}
