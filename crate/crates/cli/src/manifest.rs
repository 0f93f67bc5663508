use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cure::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Finished,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Platform {
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub parallel: bool,
}

impl Platform {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: cure::par::thread_count(),
            parallel: cfg!(feature = "parallel"),
        }
    }
}

/// Everything needed to reproduce one CLI invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: RunStatus,
    pub version: String,
    /// Effective config after overrides.
    pub config: toml::Table,
    pub seeds: Vec<u64>,
    pub platform: Platform,
    /// Fingerprints of the trained parts, keyed by part name.
    pub stage_checksums: BTreeMap<String, String>,
    /// Wall-clock seconds per stage or cell.
    pub timing: Vec<(String, f64)>,
    pub error: Option<String>,
}

pub const FILE: &str = "manifest.json";

impl RunManifest {
    pub fn start(dir: &Path, command: &str, config: toml::Table, seeds: Vec<u64>) -> Result<Self> {
        let m = Self {
            command: command.into(),
            status: RunStatus::Running,
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds,
            platform: Platform::current(),
            stage_checksums: BTreeMap::new(),
            timing: Vec::new(),
            error: None,
        };
        m.write(dir)?;
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(FILE), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn finish(mut self, dir: &Path, outcome: &anyhow::Result<()>) -> Result<()> {
        match outcome {
            Ok(()) => self.status = RunStatus::Finished,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(format!("{e:#}"));
            }
        }
        self.write(dir)
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
