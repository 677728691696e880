use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;
use crate::layout::{read_file, store_json, Layout};

/// Record of one command invocation; hashes are keyed by path relative to `--out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub tool_version: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

pub struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn start(command: &str, seed: u64, config_path: Option<&Path>) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                config_path: config_path.map(|p| p.display().to_string()),
                seed,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix_ms: now_ms(),
                finished_unix_ms: 0,
            },
        }
    }

    fn hash(layout: &Layout, paths: &[PathBuf]) -> CliResult<Vec<(String, String)>> {
        paths
            .iter()
            .map(|p| {
                let key = p.strip_prefix(layout.root()).unwrap_or(p).display().to_string();
                Ok((key, sha256_hex(&read_file(p)?)))
            })
            .collect()
    }

    pub fn inputs(&mut self, layout: &Layout, paths: &[PathBuf]) -> CliResult<()> {
        self.manifest.inputs.extend(Self::hash(layout, paths)?);
        Ok(())
    }

    pub fn outputs(&mut self, layout: &Layout, paths: &[PathBuf]) -> CliResult<()> {
        self.manifest.outputs.extend(Self::hash(layout, paths)?);
        Ok(())
    }

    pub fn finish(mut self, layout: &Layout) -> CliResult<RunManifest> {
        self.manifest.finished_unix_ms = now_ms();
        store_json(&layout.manifest(&self.manifest.command), &self.manifest)?;
        Ok(self.manifest)
    }
}
