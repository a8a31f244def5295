//! Record of one command: configuration, seeds, inputs and outputs with content hashes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use alm::{AlmError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT: &str = "alm-run-manifest";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wall_clock_ms: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects artifacts while a command runs and writes the manifest at the end.
pub struct Recorder {
    manifest: RunManifest,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Recorder {
            manifest: RunManifest {
                format: MANIFEST_FORMAT.into(),
                command: command.into(),
                config: Value::Null,
                seeds: Vec::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_clock_ms: 0,
            },
            started: Instant::now(),
        }
    }

    pub fn config<C: Serialize>(&mut self, config: &C) -> Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seeds.push(seed);
    }

    pub fn read(&mut self, path: &Path) -> Result<String> {
        let text = std::fs::read_to_string(path).map_err(|e| AlmError::Input(format!("{}: {e}", path.display())))?;
        self.manifest.inputs.push(Artifact { path: path.display().to_string(), sha256: sha256_hex(text.as_bytes()) });
        Ok(text)
    }

    pub fn record_input(&mut self, path: &Path, text: &str) {
        self.manifest.inputs.push(Artifact { path: path.display().to_string(), sha256: sha256_hex(text.as_bytes()) });
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, bytes)?;
        self.manifest.outputs.push(Artifact { path: path.display().to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn finish(mut self, path: &Path) -> Result<RunManifest> {
        self.manifest.wall_clock_ms = self.started.elapsed().as_millis() as u64;
        let text = alm::scene::to_pretty_json(&serde_json::to_value(&self.manifest)?);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, text)?;
        Ok(self.manifest)
    }
}

/// `<out>.manifest.json` next to a command's main output.
pub fn default_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
