//! Run manifests: written before any output so partial runs are visible,
//! then rewritten with output digests once the run completes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub finished_unix: Option<u64>,
    pub status: RunStatus,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn begin(
        command: &str,
        config: &impl Serialize,
        seed: u64,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(FileDigest {
                    path: p.to_path_buf(),
                    sha256: Some(sha256_file(p)?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            outputs: outputs
                .iter()
                .map(|p| FileDigest {
                    path: p.to_path_buf(),
                    sha256: None,
                })
                .collect(),
            started_unix: now(),
            finished_unix: None,
            status: RunStatus::Running,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }

    /// Records output digests and marks the run complete.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        for out in self.outputs.iter_mut() {
            if out.path.exists() {
                out.sha256 = Some(sha256_file(&out.path)?);
            }
        }
        self.finished_unix = Some(now());
        self.status = RunStatus::Complete;
        self.write(dir)?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}

/// When `file` was produced by a run whose manifest sits beside it, checks
/// the file still has the digest recorded there.
pub fn verify_against_sibling_manifest(file: &Path) -> Result<()> {
    let Some(dir) = file.parent() else { return Ok(()) };
    if !dir.join(MANIFEST_FILE).exists() {
        return Ok(());
    }
    let manifest = RunManifest::read(dir)?;
    if manifest.status != RunStatus::Complete {
        return Err(CliError::Validation(format!(
            "{} comes from an unfinished run",
            file.display()
        )));
    }
    let name = file.file_name();
    let Some(entry) = manifest.outputs.iter().find(|o| o.path.file_name() == name) else {
        return Ok(());
    };
    let actual = sha256_file(file)?;
    if entry.sha256.as_deref() != Some(actual.as_str()) {
        return Err(CliError::Validation(format!(
            "{} does not match the digest recorded in its run manifest",
            file.display()
        )));
    }
    Ok(())
}
