//! Run manifest and the per-directory lockfile.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::hash_json;
use crate::error::{CliError, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = "rsfr.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    /// Executed in this run.
    Ran,
    /// Skipped: key and outputs matched the cache.
    Cached,
    /// Cache key matched but the outputs had changed on disk; re-executed.
    Stale,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Earlier stages this stage reads from.
    pub inputs: Vec<String>,
    /// Hash of the stage's config section and its inputs' output hashes.
    pub key: String,
    pub output_hash: String,
    pub status: StageStatus,
    pub started: f64,
    pub finished: f64,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    /// Output hash of the final checkpoint, when training ran.
    pub checkpoint: Option<String>,
}

#[derive(Serialize)]
struct DigestView<'a> {
    config_hash: &'a str,
    seed: u64,
    versions: &'a BTreeMap<String, String>,
    stages: Vec<(&'a str, &'a [String], &'a str, &'a str)>,
    checkpoint: &'a Option<String>,
}

pub fn component_versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("rsfr".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("rsfr-core".to_string(), rsfr_core::VERSION.to_string()),
        ("rsfr-net".to_string(), rsfr_net::VERSION.to_string()),
    ])
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            config_hash,
            seed,
            versions: component_versions(),
            stages: Vec::new(),
            checkpoint: None,
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Hash of the manifest without timestamps, statuses and messages, so a
    /// cached rerun and a fresh run of the same config agree.
    pub fn digest(&self) -> String {
        hash_json(&DigestView {
            config_hash: &self.config_hash,
            seed: self.seed,
            versions: &self.versions,
            stages: self
                .stages
                .iter()
                .map(|s| (s.name.as_str(), s.inputs.as_slice(), s.key.as_str(), s.output_hash.as_str()))
                .collect(),
            checkpoint: &self.checkpoint,
        })
    }

    /// Every stage reads only from stages recorded before it.
    pub fn check_acyclic(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            for input in &s.inputs {
                if !self.stages[..i].iter().any(|p| &p.name == input) {
                    return Err(CliError::Config(format!(
                        "stage {} reads {input}, which is not an earlier stage",
                        s.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::store::write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        crate::store::read_json(&dir.join(MANIFEST_FILE))
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                writeln!(f, "{}", std::process::id()).at(&path)?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
