//! Content-addressed reuse of stage outputs.
//!
//! A stage writes `<out>.meta.json` next to its output, recording a key
//! derived from the stage name, its configuration and the digests of its
//! inputs, plus the digest of the output itself. A later run with the same
//! key and an untouched output can skip the stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{file_digest, sha256_hex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: String,
    pub key: String,
    pub config: serde_json::Value,
    pub inputs: Vec<(String, String)>,
    pub output_digest: String,
}

#[derive(Debug, Clone)]
pub struct StageKey {
    stage: String,
    config: serde_json::Value,
    inputs: Vec<(String, String)>,
}

impl StageKey {
    pub fn new(stage: impl Into<String>, config: serde_json::Value) -> Self {
        StageKey {
            stage: stage.into(),
            config,
            inputs: Vec::new(),
        }
    }

    /// Adds an input file by content digest; its path is not part of the key.
    pub fn input_file(mut self, label: impl Into<String>, path: &Path) -> Result<Self> {
        self.inputs.push((label.into(), file_digest(path)?));
        Ok(self)
    }

    pub fn input_digest(mut self, label: impl Into<String>, digest: impl Into<String>) -> Self {
        self.inputs.push((label.into(), digest.into()));
        self
    }

    pub fn key(&self) -> String {
        let canonical = serde_json::json!({
            "stage": self.stage,
            "config": self.config,
            "inputs": self.inputs,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

pub fn meta_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    output.with_file_name(name)
}

/// True when `output` exists, its sidecar matches `key`, and the output
/// bytes are unchanged since they were recorded.
pub fn is_fresh(output: &Path, key: &StageKey) -> bool {
    let Ok(text) = std::fs::read_to_string(meta_path(output)) else {
        return false;
    };
    let Ok(meta) = serde_json::from_str::<StageMeta>(&text) else {
        return false;
    };
    if meta.key != key.key() || !output.is_file() {
        return false;
    }
    matches!(file_digest(output), Ok(d) if d == meta.output_digest)
}

pub fn record(output: &Path, key: &StageKey) -> Result<StageMeta> {
    let meta = StageMeta {
        stage: key.stage.clone(),
        key: key.key(),
        config: key.config.clone(),
        inputs: key.inputs.clone(),
        output_digest: file_digest(output)?,
    };
    let path = meta_path(output);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}
