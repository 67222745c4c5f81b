//! Run manifests and the single-writer output discipline.
//!
//! Every artifact goes through [`Outputs::write`], which writes to a
//! temporary sibling and renames it into place. The manifest written by
//! [`Outputs::finish`] lists each artifact with its digest; the manifest is
//! the only file not listed in itself.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use optiset_core::sha256_hex;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub core_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub sub_seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

/// Derives a named sub-seed from the run seed.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let digest = sha256_hex(format!("{name}:{seed}"));
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

pub struct Outputs {
    dir: PathBuf,
    manifest: Manifest,
}

impl Outputs {
    pub fn new(dir: &Path, command: &str, config_bytes: &[u8], seed: u64) -> Self {
        Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                core_version: optiset_core::VERSION.to_string(),
                config_sha256: sha256_hex(config_bytes),
                seed,
                sub_seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
        }
    }

    /// Returns the named sub-seed and records it.
    pub fn seed(&mut self, name: &str) -> u64 {
        let s = sub_seed(self.manifest.seed, name);
        self.manifest.sub_seeds.insert(name.to_string(), s);
        s
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.manifest.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        if self.manifest.outputs.iter().any(|o| o.path == name) {
            return Err(CliError::Invariant(format!(
                "{name} written twice in one run"
            )));
        }
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        self.manifest.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| CliError::Invariant(format!("cannot serialize {name}: {e}")))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn write_jsonl<T: Serialize>(
        &mut self,
        name: &str,
        items: &[T],
    ) -> Result<PathBuf, CliError> {
        let mut bytes = Vec::new();
        optiset_core::records::write_jsonl_to(&mut bytes, items)
            .map_err(|e| CliError::Invariant(format!("cannot serialize {name}: {e}")))?;
        self.write(name, &bytes)
    }

    /// Writes `<command>.manifest.json` and returns its path.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let name = format!("{}.manifest.json", self.manifest.command);
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| CliError::Invariant(e.to_string()))?;
        bytes.push(b'\n');
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
