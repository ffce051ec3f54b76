//! Output layout, content hashing and the `run.json` record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::failure::Failure;

pub const TRAIN_DATA: &str = "data/train.jsonl";
pub const HELDOUT_DATA: &str = "data/heldout.jsonl";
pub const EVAL_CONDS: &str = "data/eval_conds.jsonl";
pub const PREFS: &str = "data/prefs.jsonl";
pub const BASE_PARAMS: &str = "params/base.json";

pub fn tpo_params(variant: &str) -> String {
    format!("params/tpo-{variant}.json")
}

/// Git-style blob hash (`blob <len>\0` header) using SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config: &'a RunConfig,
    inputs: &'a BTreeMap<String, String>,
    input_hash: String,
    outputs: &'a BTreeMap<String, String>,
}

/// Tracks the files one command reads and writes under the output directory.
pub struct Run {
    root: PathBuf,
    command: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    pub fn new(root: &Path, command: impl Into<String>) -> Self {
        Self {
            root: root.to_path_buf(),
            command: command.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Hashes an upstream artifact, failing with a dependency error naming it
    /// when it does not exist.
    pub fn input(&mut self, rel: &str, producer: &str) -> Result<PathBuf, Failure> {
        let path = self.path(rel);
        if !path.is_file() {
            return Err(Failure::missing(&path, producer));
        }
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(rel.to_string(), blob_hash(&bytes));
        Ok(path)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(rel.to_string(), blob_hash(bytes));
        Ok(path)
    }

    /// Records a file some other writer already produced.
    pub fn record_output(&mut self, rel: &str) -> Result<()> {
        let bytes = std::fs::read(self.path(rel)).with_context(|| format!("reading {rel}"))?;
        self.outputs.insert(rel.to_string(), blob_hash(&bytes));
        Ok(())
    }

    /// Creates the parent directory of `rel` and returns its full path.
    pub fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(path)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &String> {
        self.outputs.keys()
    }

    pub fn finish(self, config: &RunConfig) -> Result<()> {
        let listing: String = self.inputs.iter().map(|(k, v)| format!("{v} {k}\n")).collect();
        let record = RunRecord {
            command: &self.command,
            config,
            inputs: &self.inputs,
            input_hash: blob_hash(listing.as_bytes()),
            outputs: &self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&record)?;
        text.push('\n');
        std::fs::create_dir_all(&self.root)?;
        std::fs::write(self.root.join("run.json"), text)?;
        Ok(())
    }
}
