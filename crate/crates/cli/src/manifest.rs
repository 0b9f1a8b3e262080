//! Per-stage run manifests: the resolved config plus SHA-256 digests of
//! every input and output, with paths relative to the run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Collects the files a stage reads and writes, then writes
/// `<command>.config.toml` and `<command>.manifest.json` into the run
/// directory.
pub struct StageRecord<'a> {
    cfg: &'a RunConfig,
    command: &'a str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> StageRecord<'a> {
    pub fn new(cfg: &'a RunConfig, command: &'a str) -> Self {
        Self { cfg, command, inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    pub fn output(&mut self, path: &Path) -> PathBuf {
        self.outputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn label(&self, path: &Path) -> String {
        path.strip_prefix(&self.cfg.io.run_dir).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    fn digests(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths.iter().map(|p| Ok((self.label(p), file_digest(p)?))).collect()
    }

    pub fn finish(self) -> Result<Manifest> {
        let config_text = self.cfg.to_toml();
        let config_path = self.cfg.io.path(format!("{}.config.toml", self.command));
        fs::write(&config_path, &config_text).with_context(|| format!("writing {}", config_path.display()))?;
        let manifest = Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.cfg.seed,
            config_sha256: sha256_hex(config_text.as_bytes()),
            inputs: self.digests(&self.inputs)?,
            outputs: self.digests(&self.outputs)?,
        };
        let path = self.cfg.io.path(format!("{}.manifest.json", self.command));
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}
