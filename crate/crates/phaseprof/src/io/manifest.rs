//! Run manifests: one JSON file written alongside every command's output.

use std::path::Path;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::{io_err, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub started_utc: String,
    pub finished_utc: String,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            config: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_utc: now(),
            finished_utc: String::new(),
        }
    }

    /// Stamps the finish time and writes the manifest.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_utc = now();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        super::write_atomic(path, |w| {
            w.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
        })
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}
