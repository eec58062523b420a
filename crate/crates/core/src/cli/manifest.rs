use std::io::Read;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// What one subcommand read and wrote. Paths are relative to the run directory
/// when they live inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub config: IndexMap<String, serde_json::Value>,
    pub inputs: IndexMap<String, String>,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub version: String,
    /// Steps keyed by subcommand, in first-run order.
    pub steps: IndexMap<String, StepRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn rel(run_dir: &Path, p: &Path) -> String {
    p.strip_prefix(run_dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

impl Manifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    /// The existing manifest of `run_dir`, or a fresh one.
    pub fn load_or_new(run_dir: &Path, run_id: &str) -> Result<Manifest> {
        let p = Self::path(run_dir);
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let m: Manifest = serde_json::from_str(&text)?;
            if m.run_id == run_id {
                return Ok(m);
            }
        }
        Ok(Manifest {
            run_id: run_id.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            steps: IndexMap::new(),
        })
    }

    /// Records a step, hashing every input file.
    pub fn record(
        &mut self,
        run_dir: &Path,
        step: &str,
        config: IndexMap<String, serde_json::Value>,
        inputs: &[PathBuf],
        artifacts: &[PathBuf],
    ) -> Result<()> {
        let mut digests = IndexMap::new();
        for p in inputs {
            digests.insert(rel(run_dir, p), sha256_file(p)?);
        }
        let record = StepRecord {
            config,
            inputs: digests,
            artifacts: artifacts.iter().map(|p| rel(run_dir, p)).collect(),
        };
        self.steps.insert(step.to_string(), record);
        self.version = env!("CARGO_PKG_VERSION").to_string();
        Ok(())
    }

    pub fn save(&self, run_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let p = Self::path(run_dir);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}
