use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The part of a run that determines its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunIdentity {
    pub command: String,
    pub config_sha256: String,
    pub overrides: BTreeMap<String, String>,
    pub tolerances: BTreeMap<String, f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Hash of `identity`; every JSON output carries it.
    pub run_id: String,
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
    pub identity: RunIdentity,
}

impl RunManifest {
    pub fn new(
        identity: RunIdentity,
        config_path: &Path,
        out_dir: &Path,
        jobs: Option<usize>,
    ) -> Self {
        let run_id = sha256_hex(&serde_json::to_vec(&identity).expect("identity serializes"));
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            run_id,
            config_path: config_path.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
            jobs,
            identity,
        }
    }
}

/// Writes into one output directory.
pub struct Output {
    dir: PathBuf,
    run_id: String,
}

impl Output {
    /// Creates the directory and writes `manifest.json` first.
    pub fn create(manifest: &RunManifest) -> Result<Self, CliError> {
        fs::create_dir_all(&manifest.out_dir)?;
        let out = Self {
            dir: manifest.out_dir.clone(),
            run_id: manifest.run_id.clone(),
        };
        out.write_text("manifest.json", &pretty(manifest))?;
        Ok(out)
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        fs::write(self.path(name), text)?;
        Ok(())
    }

    /// Serializes `{"run_id": ..., <fields of value>}`.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<String, CliError> {
        let mut doc = serde_json::Map::new();
        doc.insert("run_id".into(), self.run_id.clone().into());
        match serde_json::to_value(value).expect("output serializes") {
            serde_json::Value::Object(map) => doc.extend(map),
            other => {
                doc.insert("data".into(), other);
            }
        }
        let text = pretty(&doc);
        self.write_text(name, &text)?;
        Ok(text)
    }
}

pub fn pretty<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    text
}
