use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use hybridflow_core::{Error, Result};
use serde::Serialize;

pub const MANIFEST_NAME: &str = "manifest.toml";

/// Record of one CLI invocation, kept next to its artifacts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
    pub config: toml::Table,
    #[serde(skip)]
    dir: PathBuf,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    /// Creates the output directory and writes the initial manifest.
    pub fn begin(dir: &Path, command: &str, seed: u64, config: toml::Table) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let m = Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            started_unix,
            status: "running".into(),
            wall_clock_s: None,
            outputs: Vec::new(),
            notes: Vec::new(),
            config,
            dir: dir.to_path_buf(),
            clock: Some(Instant::now()),
        };
        m.write()?;
        Ok(m)
    }

    pub fn output(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path);
        self.outputs.push(rel.display().to_string());
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn write(&self) -> Result<()> {
        let text =
            toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("manifest: {e}")))?;
        fs::write(self.dir.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn finish(&mut self, status: &str) -> Result<()> {
        self.status = status.to_string();
        self.wall_clock_s = self.clock.map(|c| c.elapsed().as_secs_f64());
        self.write()
    }
}

pub fn to_table<T: Serialize>(value: &T) -> Result<toml::Table> {
    toml::Table::try_from(value).map_err(|e| Error::InvalidConfig(e.to_string()))
}
