use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FORMAT: &str = "gridflow-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub manifest_version: u32,
    pub gridflow_version: String,
    pub checkpoint_version: u32,
    pub command: String,
    /// `ok` or `aborted`.
    pub status: String,
    pub config: RunConfig,
    /// Input path as configured -> sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output name relative to `out_dir` -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub report: toml::Table,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            manifest_version: MANIFEST_VERSION,
            gridflow_version: env!("CARGO_PKG_VERSION").into(),
            checkpoint_version: gridflow_core::diffusion::CHECKPOINT_VERSION,
            command: command.into(),
            status: "ok".into(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            report: toml::Table::new(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let m: Manifest = toml::from_str(text).map_err(|e| e.to_string())?;
        if m.format != MANIFEST_FORMAT {
            return Err(format!("unknown manifest format {:?}", m.format));
        }
        if m.manifest_version != MANIFEST_VERSION {
            return Err(format!("unsupported manifest version {}", m.manifest_version));
        }
        Ok(m)
    }

    pub fn report(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.report.insert(key.into(), value.into());
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads an input file and records its hash.
pub fn read_input(path: &Path, manifest: &mut Manifest) -> Result<Vec<u8>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::file(path, e))?;
    manifest
        .inputs
        .insert(path.display().to_string(), sha256_hex(&bytes));
    Ok(bytes)
}

/// Output files held in memory until the whole run has succeeded.
#[derive(Default)]
pub struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, name: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    /// Writes every file under `out_dir`, refusing to overwrite a run input.
    pub fn commit(self, out_dir: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
        let inputs: Vec<PathBuf> = manifest
            .inputs
            .keys()
            .filter_map(|p| fs::canonicalize(p).ok())
            .collect();
        let targets: Vec<PathBuf> = self.files.iter().map(|(n, _)| out_dir.join(n)).collect();
        for t in &targets {
            if let Ok(c) = fs::canonicalize(t) {
                if inputs.contains(&c) {
                    return Err(CliError::file(t, "output would overwrite an input file"));
                }
            }
        }
        for ((name, bytes), target) in self.files.into_iter().zip(targets) {
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(|e| CliError::file(parent, e))?;
            }
            fs::write(&target, &bytes).map_err(|e| CliError::file(&target, e))?;
            manifest
                .outputs
                .insert(name.display().to_string(), sha256_hex(&bytes));
        }
        Ok(())
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::file(parent, e))?;
    }
    fs::write(path, manifest.to_toml()).map_err(|e| CliError::file(path, e))
}
