use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tiertune::artifact::SCHEMA_VERSION;

/// Written next to every primary output as `<output>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    /// `builtin` or the catalog file path.
    pub catalog: String,
    pub catalog_version: u32,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, catalog: &str, catalog_version: u32) -> Self {
        Self {
            kind: "run-manifest".to_string(),
            version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            catalog: catalog.to_string(),
            catalog_version,
            seeds: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn artifact(mut self, name: &str, path: &Path) -> Self {
        self.artifacts.insert(name.to_string(), path.to_path_buf());
        self
    }

    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_os_string();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    pub fn save_for(&self, output: &Path) -> std::io::Result<PathBuf> {
        let path = Self::path_for(output);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
