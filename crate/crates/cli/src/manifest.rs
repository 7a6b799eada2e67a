use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputHash {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-execute a run and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// Fully resolved config, including defaults and overrides.
    pub config: serde_json::Value,
    pub outputs: Vec<OutputHash>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = fs::File::open(path).map_err(CliError::io(path))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(CliError::io(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, dir: &Path, files: &[String]) -> Result<Self, CliError> {
        let outputs = files
            .iter()
            .map(|f| {
                Ok(OutputHash {
                    path: f.clone(),
                    sha256: sha256_file(&dir.join(f))?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Self {
            format_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            outputs,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(CliError::io(path))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(CliError::Config(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                m.format_version
            )));
        }
        Ok(m)
    }
}
