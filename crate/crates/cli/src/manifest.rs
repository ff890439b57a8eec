use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn hash(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: format!("{:x}", Sha256::digest(&bytes)),
        })
    }
}

/// Record written next to every output: enough to rerun the command exactly.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub subcommand: &'static str,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(subcommand: &'static str, seed: u64, config: Value) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self, CliError> {
        self.inputs.push(Artifact::hash(path)?);
        Ok(self)
    }

    pub fn output(mut self, path: &Path) -> Result<Self, CliError> {
        self.outputs.push(Artifact::hash(path)?);
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::runtime(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
    }
}
