use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of one stage's outputs. Carries no timestamps so repeated
/// runs of the same config produce identical files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub index_mode: Option<String>,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// File name to hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
    /// Upstream file name to hex SHA-256.
    pub inputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let file = File::open(path).map_err(|e| semrec::Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader
            .read(&mut buf)
            .map_err(|e| semrec::Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl Manifest {
    pub fn new(stage: &str, config: &PipelineConfig, index_mode: Option<&str>) -> Self {
        Manifest {
            stage: stage.to_string(),
            index_mode: index_mode.map(str::to_string),
            config_hash: config.hash(),
            seeds: config
                .seeds()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            artifacts: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn artifact(&mut self, dir: &Path, name: &str) -> CliResult<()> {
        let sum = sha256_file(&dir.join(name))?;
        self.artifacts.insert(name.to_string(), sum);
        Ok(())
    }

    pub fn input(&mut self, label: &str, path: &Path) -> CliResult<()> {
        let sum = sha256_file(path)?;
        self.inputs.insert(label.to_string(), sum);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| semrec::Error::io(&path, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| semrec::Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)
            .map_err(|e| semrec::Error::data(format!("{}: {e}", path.display())))?)
    }
}
