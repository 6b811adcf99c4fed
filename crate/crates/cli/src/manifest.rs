use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one CLI invocation, written beside its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub tool_version: String,
    pub inputs: Vec<InputDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects inputs and outputs of a run.
pub struct Run {
    pub command: String,
    pub out: PathBuf,
    pub seeds: BTreeMap<String, u64>,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
    started: std::time::Instant,
}

impl Run {
    pub fn new(command: &str, out: &Path) -> Self {
        Run {
            command: command.to_string(),
            out: out.to_path_buf(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: std::time::Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn outputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.outputs.extend(paths);
    }

    /// Check every output exists and is non-empty, then write the manifest.
    pub fn finish(self, config: serde_json::Value) -> Result<RunManifest> {
        let mut rel = Vec::new();
        for p in &self.outputs {
            let meta = std::fs::metadata(p)
                .with_context(|| format!("expected output {} is missing", p.display()))?;
            if meta.is_file() && meta.len() == 0 {
                bail!("output {} is empty", p.display());
            }
            rel.push(p.strip_prefix(&self.out).unwrap_or(p).display().to_string());
        }
        let manifest = RunManifest {
            command: self.command,
            config,
            seeds: self.seeds,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: self.inputs,
            outputs: rel,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out.join(RUN_MANIFEST);
        brushforge::surface::write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}
