//! Run manifests: what was run, on which inputs, with which seeds.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Invocation;
use crate::Invalid;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path) -> Result<Self, Invalid> {
        Ok(Self { path: path.to_path_buf(), sha256: sha256_file(path)? })
    }

    /// Recomputes the digest and compares.
    pub fn verify(&self) -> Result<(), Invalid> {
        let now = sha256_file(&self.path)?;
        if now != self.sha256 {
            return Err(Invalid(format!(
                "input {} changed since the run (sha256 {}, manifest has {})",
                self.path.display(),
                now,
                self.sha256
            )));
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String, Invalid> {
    let mut file = std::fs::File::open(path).map_err(|e| Invalid(format!("cannot open {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Invalid(format!("cannot read {}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration; replaying it reruns the command.
    pub config: Invocation,
    /// The master seed and every seed derived from it, by label.
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputDigest>,
    pub version: String,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self, Invalid> {
        let path = if path.is_dir() { path.join(FILE_NAME) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Invalid(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Invalid(format!("manifest {}: {e}", path.display())))
    }
}
