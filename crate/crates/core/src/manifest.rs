//! Run manifests: what a command was given and what it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Provider name and script or model fingerprint, when a provider was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    /// File name to sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Counts or metrics the command reported.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub summary: Value,
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(digest::sha256_hex(&std::fs::read(path)?))
}

fn file_key(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// `<artifact>.manifest.json` next to the artifact.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: Value) -> RunManifest {
        RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            ..RunManifest::default()
        }
    }

    pub fn seed(mut self, name: &str, seed: u64) -> RunManifest {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn provider(mut self, fingerprint: impl Into<String>) -> RunManifest {
        self.provider = Some(fingerprint.into());
        self
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.insert(file_key(path), file_digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs.insert(file_key(path), file_digest(path)?);
        Ok(())
    }

    /// Writes the manifest beside `artifact` and returns its path.
    pub fn write_for(&self, artifact: &Path) -> std::io::Result<PathBuf> {
        let path = manifest_path(artifact);
        let mut bytes = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> std::io::Result<RunManifest> {
        serde_json::from_slice(&std::fs::read(path)?).map_err(std::io::Error::other)
    }
}
