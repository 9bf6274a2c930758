//! `manifest.json`: what a run read, how it was configured and what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputEntry {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputEntry {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    /// False for files carrying wall-clock values (the training log).
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputEntry>,
    pub outputs: Vec<OutputEntry>,
    /// Headline numbers of the run, if any.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub results: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects inputs and outputs while a subcommand runs, then writes
/// `config.json` and `manifest.json` into the run directory.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    command: String,
    inputs: Vec<InputEntry>,
    outputs: Vec<(String, bool)>,
    pub results: BTreeMap<String, serde_json::Value>,
}

impl Run {
    pub fn create(dir: &Path, command: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            results: BTreeMap::new(),
        })
    }

    /// Hashes an input before it is read.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputEntry { role: role.to_string(), path: path.display().to_string(), sha256 });
        Ok(())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.record(rel, true);
        Ok(path)
    }

    /// Registers a file written by library code.
    pub fn record(&mut self, rel: &str, deterministic: bool) {
        self.outputs.retain(|(p, _)| p != rel);
        self.outputs.push((rel.to_string(), deterministic));
    }

    pub fn finish(mut self, config: &impl Serialize) -> Result<Manifest, CliError> {
        let config = serde_json::to_value(config).map_err(|e| CliError::internal(e.to_string()))?;
        self.write(CONFIG, serde_json::to_string_pretty(&config).expect("json value serializes") + "\n")?;
        let mut outputs = Vec::new();
        self.outputs.sort();
        for (rel, deterministic) in &self.outputs {
            outputs.push(OutputEntry { path: rel.clone(), sha256: sha256_file(&self.path(rel))?, deterministic: *deterministic });
        }
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command,
            config,
            inputs: self.inputs,
            outputs,
            results: self.results,
        };
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("invalid manifest: {e}")).with_path(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub path: String,
    pub expected: String,
    /// `None` when the file is missing.
    pub found: Option<String>,
}

/// Re-hashes every listed input and output.
pub fn verify(manifest: &Manifest, dir: &Path) -> Vec<Mismatch> {
    let inputs = manifest.inputs.iter().map(|i| (PathBuf::from(&i.path), &i.sha256));
    let outputs = manifest.outputs.iter().map(|o| (dir.join(&o.path), &o.sha256));
    inputs
        .chain(outputs)
        .filter_map(|(path, expected)| {
            let found = sha256_file(&path).ok();
            (found.as_ref() != Some(expected)).then(|| Mismatch {
                path: path.display().to_string(),
                expected: expected.clone(),
                found,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn tampering_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::create(dir.path(), "test").unwrap();
        run.write("a.txt", "hello").unwrap();
        let m = run.finish(&serde_json::json!({})).unwrap();
        assert!(verify(&m, dir.path()).is_empty());
        std::fs::write(dir.path().join("a.txt"), "hullo").unwrap();
        let bad = verify(&m, dir.path());
        assert_eq!(bad.len(), 1);
        assert!(bad[0].path.ends_with("a.txt"));
    }
}
