use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use convmf::checkpoint::CHECKPOINT_VERSION;
use convmf::corpus::CORPUS_FORMAT_VERSION;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Where a config value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Fixed by the method description.
    Fixed,
    /// Chosen by this implementation.
    Default,
    /// Given on the command line.
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub value: serde_json::Value,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub corpus_format_version: u32,
    pub checkpoint_format_version: u32,
    pub seed: u64,
    pub config: BTreeMap<String, ConfigEntry>,
    /// Input label → sha256 of the file.
    pub inputs: BTreeMap<String, String>,
    /// File names written to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            corpus_format_version: CORPUS_FORMAT_VERSION,
            checkpoint_format_version: CHECKPOINT_VERSION,
            seed,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize, provenance: Provenance) {
        let value = serde_json::to_value(value).expect("config value serializes");
        self.config
            .insert(key.to_string(), ConfigEntry { value, provenance });
    }

    /// `user` when the flag was given, otherwise `fallback`.
    pub fn set_flag<T: Serialize>(
        &mut self,
        key: &str,
        given: Option<T>,
        default: T,
        fallback: Provenance,
    ) {
        match given {
            Some(v) => self.set(key, v, Provenance::User),
            None => self.set(key, default, fallback),
        }
    }

    pub fn add_input(&mut self, label: &str, path: &Path) -> io::Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.insert(label.to_string(), hash);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
