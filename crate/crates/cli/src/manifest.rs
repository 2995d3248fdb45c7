//! `manifest.json`: what produced a directory of artifacts, and their hashes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    pub version: String,
    /// Relative path to SHA-256, for every file under the directory.
    pub artifacts: BTreeMap<String, String>,
}

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes every regular file below `dir` except the manifest itself, keyed by
/// `/`-separated relative path.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).expect("walk stays below dir");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if key != MANIFEST_FILE {
                out.insert(key, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

impl Manifest {
    /// Builds the manifest for `dir` and writes it there.
    pub fn write(dir: &Path, command: &str, config_hash: &str, seed: u64, deterministic: bool) -> Result<Self, CliError> {
        let m = Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            deterministic,
            version: version(),
            artifacts: hash_tree(dir)?,
        };
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}
