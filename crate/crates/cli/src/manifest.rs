//! `manifest.json`: config hash plus checksum and stage version of every artifact.

use crate::error::CliError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub stage: String,
    pub stage_version: u32,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    /// Keyed by file name relative to the output directory.
    pub artifacts: BTreeMap<String, Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct OutDir {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl OutDir {
    /// Open or create the directory; an existing manifest must carry the same config hash.
    pub fn open(dir: &Path, config_hash: String, config: BTreeMap<String, String>) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST);
        let manifest = if path.exists() {
            let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            if m.config_hash != config_hash {
                return Err(CliError::ConfigMismatch { expected: config_hash, found: m.config_hash });
            }
            m
        } else {
            Manifest { config_hash, config, artifacts: BTreeMap::new() }
        };
        Ok(OutDir { dir: dir.to_path_buf(), manifest })
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.artifacts.contains_key(name)
    }

    /// Read an artifact after checking it against the manifest.
    pub fn read(&self, name: &str, command: &'static str) -> Result<Vec<u8>, CliError> {
        let entry = self.manifest.artifacts.get(name).ok_or_else(|| CliError::MissingStage { artifact: name.into(), command })?;
        let bytes = std::fs::read(self.dir.join(name)).map_err(|_| CliError::MissingStage { artifact: name.into(), command })?;
        let found = sha256_hex(&bytes);
        if found != entry.sha256 {
            return Err(CliError::Checksum { artifact: name.into(), expected: entry.sha256.clone(), found });
        }
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, stage: &str, stage_version: u32, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), bytes)?;
        let a = Artifact { stage: stage.into(), stage_version, sha256: sha256_hex(bytes), bytes: bytes.len() as u64 };
        self.manifest.artifacts.insert(name.into(), a);
        self.save()
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, stage: &str, stage_version: u32, v: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write(name, stage, stage_version, s.as_bytes())
    }

    fn save(&self) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(&self.manifest)?;
        s.push('\n');
        std::fs::write(self.dir.join(MANIFEST), s)?;
        Ok(())
    }
}
