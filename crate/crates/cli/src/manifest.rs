use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seqcons::report::round_ms;
use seqcons::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Description of one command run and the files it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    pub data: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub options: BTreeMap<String, serde_json::Value>,
    pub engine_version: String,
    /// Wall-clock seconds per phase, excluding file I/O.
    pub timings: BTreeMap<String, f64>,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            config: None,
            data: vec![],
            seed: None,
            options: BTreeMap::new(),
            engine_version: env!("CARGO_PKG_VERSION").into(),
            timings: BTreeMap::new(),
            outputs: vec![],
        }
    }

    pub fn option(&mut self, key: &str, value: impl Serialize) {
        self.options.insert(key.into(), serde_json::to_value(value).expect("plain option values"));
    }

    pub fn time(&mut self, phase: &str, seconds: f64) {
        self.timings.insert(phase.into(), round_ms(seconds));
    }

    /// Records a file already written under `dir`.
    pub fn add_output(&mut self, dir: &Path, relative: &str) -> Result<()> {
        let bytes = std::fs::read(dir.join(relative))?;
        self.outputs.push(OutputFile { path: relative.into(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Results(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Checks that every listed output exists with its recorded checksum.
pub fn verify(dir: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Results(e.to_string()))?;
    for f in &m.outputs {
        let bytes = std::fs::read(dir.join(&f.path))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(Error::Results(format!("checksum of `{}` does not match the manifest", f.path)));
        }
    }
    Ok(m)
}
