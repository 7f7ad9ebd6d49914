//! Run directories and their `MANIFEST.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

pub const RUN_MANIFEST: &str = "MANIFEST.json";

pub struct RunDir {
    pub root: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn record(&mut self, rel: impl Into<String>) {
        self.artifacts.push(rel.into());
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
        self.write_text(rel, &text)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> CliResult<()> {
        let path = self.path(rel);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        self.record(rel);
        Ok(())
    }

    /// Writes the manifest listing every recorded artifact. The timestamp
    /// is the only field that differs between identical runs.
    pub fn finish<T: Serialize>(self, command: &str, seed: u64, config: &T) -> CliResult<()> {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "config": config,
            "artifacts": self.artifacts,
            "created_unix": created,
        });
        let path = self.root.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core {
        context: "writing run output".into(),
        source: gridfill_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    }
}

/// Loads a JSON config file, or the defaults when none is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Value of the config as JSON, for echoing into reports.
pub fn to_value<T: Serialize>(config: &T) -> Value {
    serde_json::to_value(config).unwrap_or(Value::Null)
}
