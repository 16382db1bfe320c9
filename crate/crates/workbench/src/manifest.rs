//! Run manifests and artifact bookkeeping.

use std::fs;
use std::path::{Path, PathBuf};

use robustedit_core::model::CRML_VERSION;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DerivedSeeds, RunConfig};
use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Formats {
    pub crml: u32,
    pub manifest: u32,
    pub dataset: &'static str,
}

/// Everything needed to rerun a command bitwise. The output directory and
/// the worker count are deliberately absent.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub formats: Formats,
    pub config: RunConfig,
    pub seeds: DerivedSeeds,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects input digests and writes outputs into the run directory.
pub struct Artifacts {
    out: PathBuf,
    inputs: Vec<FileDigest>,
    input_paths: Vec<PathBuf>,
    outputs: Vec<FileDigest>,
}

impl Artifacts {
    pub fn new(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out).map_err(|e| {
            CliError::Config(format!("cannot create output directory {}: {e}", out.display()))
        })?;
        Ok(Self {
            out: out.to_path_buf(),
            inputs: Vec::new(),
            input_paths: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Reads an input file, recording its digest.
    pub fn read_input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read {role} {}: {e}", path.display())))?;
        self.inputs.push(FileDigest {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        if let Ok(p) = fs::canonicalize(path) {
            self.input_paths.push(p);
        }
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        if let Ok(p) = fs::canonicalize(&path) {
            if self.input_paths.contains(&p) {
                return Err(CliError::Config(format!(
                    "refusing to overwrite input file {}",
                    path.display()
                )));
            }
        }
        fs::write(&path, bytes)?;
        self.outputs.push(FileDigest {
            role: name.to_string(),
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `manifest.json` and returns every path written.
    pub fn finish(mut self, command: &str, config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
        let manifest = Manifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            formats: Formats {
                crml: CRML_VERSION,
                manifest: MANIFEST_VERSION,
                dataset: "jsonl",
            },
            config: config.snapshot(),
            seeds: config.seeds(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        };
        let mut paths: Vec<PathBuf> = self.outputs.iter().map(|o| self.out.join(&o.path)).collect();
        paths.push(self.write_json(MANIFEST_FILE, &manifest)?);
        Ok(paths)
    }
}
