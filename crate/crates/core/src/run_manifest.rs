//! Record of one command invocation, written before its work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ToolkitConfig;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Command inputs that are not config keys (annotation paths, checkpoint).
    pub inputs: BTreeMap<String, Value>,
    /// Fully resolved.
    pub config: ToolkitConfig,
    pub toolkit_version: String,
    /// RFC 3339, UTC.
    pub timestamp: String,
    pub outputs: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: ToolkitConfig) -> Self {
        Self {
            command: command.into(),
            inputs: BTreeMap::new(),
            config,
            toolkit_version: crate::VERSION.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(mut self, name: &str, value: impl Serialize) -> Self {
        self.inputs.insert(name.to_string(), serde_json::to_value(value).expect("input serializes"));
        self
    }

    pub fn output(mut self, name: &str, path: impl Into<PathBuf>) -> Self {
        self.outputs.insert(name.to_string(), path.into());
        self
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self).expect("manifest serializes"))
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
