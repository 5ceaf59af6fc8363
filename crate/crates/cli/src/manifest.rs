//! Run-directory bookkeeping: which stages finished, with which settings,
//! and what they wrote.

use std::collections::BTreeMap;
use std::path::Path;

use amp_core::AmpError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the settings and predecessor fingerprints the stage ran with.
    pub fingerprint: String,
    /// Artifact role → file name inside the run directory.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config: RunConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            stages: BTreeMap::new(),
        }
    }

    pub fn load_or_new(dir: &Path, config: &RunConfig) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new(config.clone()));
        }
        let mut m: RunManifest = amp_core::io::read_json(&path)?;
        m.config = config.clone();
        m.tool_version = env!("CARGO_PKG_VERSION").to_string();
        Ok(m)
    }

    /// Writes the manifest after checking every referenced artifact exists.
    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        for (stage, rec) in &self.stages {
            for (role, file) in &rec.artifacts {
                if !dir.join(file).exists() {
                    return Err(AmpError::Contract(format!(
                        "manifest references missing {role} artifact {file} of stage {stage}"
                    ))
                    .into());
                }
            }
        }
        amp_core::io::write_json(dir.join(MANIFEST_FILE), self)?;
        Ok(())
    }

    /// A stage counts as complete only while all of its artifacts exist.
    pub fn completed(&self, dir: &Path, stage: &str) -> Option<&StageRecord> {
        self.stages
            .get(stage)
            .filter(|r| r.artifacts.values().all(|f| dir.join(f).exists()))
    }

    pub fn artifact(&self, stage: &str, role: &str) -> Option<&str> {
        self.stages.get(stage)?.artifacts.get(role).map(String::as_str)
    }
}

pub fn fingerprint(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    hex::encode(&digest[..12])
}
