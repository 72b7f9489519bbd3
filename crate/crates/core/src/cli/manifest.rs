use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::Command;
use crate::{Error, Result};

/// Version string recorded in manifests.
pub const ARTIFACT_VERSION: &str = concat!("sne-core-v", env!("CARGO_PKG_VERSION"));

/// Record of one CLI run, written before any work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Parsed arguments with every default filled in; replayable.
    pub args: Command,
    /// The library-level configuration the arguments resolve to.
    pub resolved: serde_json::Value,
    pub outputs: Vec<PathBuf>,
    pub started_unix_seconds: u64,
}

impl RunManifest {
    pub fn new(args: &Command, seed: Option<u64>, resolved: serde_json::Value, outputs: Vec<PathBuf>) -> Self {
        Self {
            command: args.name().into(),
            version: ARTIFACT_VERSION.into(),
            seed,
            args: args.clone(),
            resolved,
            outputs,
            started_unix_seconds: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("serializing manifest: {e}")))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}
