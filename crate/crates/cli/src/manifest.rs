use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cacl_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RUN_MANIFEST_FILE: &str = "run.json";

/// Record of one invocation, written last into the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Option<TrainConfig>,
    pub data_source: Option<String>,
    /// SHA-256 of the resolved config and the input samples.
    pub input_hash: String,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Collects output files of a run under one directory.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        crate::resolve::ensure_dir(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn record(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| cacl_core::Error::io(&path, e))?;
        self.record(name);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(value).map_err(cacl_core::Error::from)?;
        self.write(name, text + "\n")
    }

    /// Writes `run.json` listing everything recorded so far.
    pub fn finish(
        mut self,
        command: &str,
        config: Option<&TrainConfig>,
        data_source: Option<String>,
        input_hash: String,
        started_unix: u64,
    ) -> Result<(), CliError> {
        self.record(RUN_MANIFEST_FILE);
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.cloned(),
            data_source,
            input_hash,
            outputs: self.written.clone(),
            started_unix,
            finished_unix: unix_now(),
        };
        self.write_json(RUN_MANIFEST_FILE, &manifest)?;
        Ok(())
    }
}
