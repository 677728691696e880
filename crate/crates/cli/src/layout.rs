//! File layout of a working directory shared by all commands.

use std::fs;
use std::path::{Path, PathBuf};

use ditq::sim::LayerKind;
use ditq::tensor::{read_tensor, write_tensor, TensorFile};

use crate::error::{CliError, CliResult};

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `path` itself when absolute, otherwise joined onto the output directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn model_meta(&self) -> PathBuf {
        self.root.join("model").join("meta.json")
    }

    pub fn weight(&self, block: usize, kind: LayerKind) -> PathBuf {
        self.root.join("model").join(format!("block{block}.{}.ditq", kind.name()))
    }

    pub fn trace(&self, id: usize, block: usize) -> PathBuf {
        self.root.join("traces").join(format!("trace{id:05}.block{block}.ditq"))
    }

    pub fn stats_absmax(&self, block: usize) -> PathBuf {
        self.root.join("calib").join(format!("block{block}.absmax.ditq"))
    }

    pub fn stats_minmax(&self, block: usize) -> PathBuf {
        self.root.join("calib").join(format!("block{block}.minmax.ditq"))
    }

    pub fn stats_sidecar(&self, block: usize) -> PathBuf {
        self.root.join("calib").join(format!("block{block}.stats.json"))
    }

    pub fn smoothing(&self, block: usize, kind: LayerKind) -> PathBuf {
        self.root.join("calib").join(format!("block{block}.{}.smoothing.ditq", kind.name()))
    }

    pub fn smoothing_sidecar(&self) -> PathBuf {
        self.root.join("calib").join("smoothing.json")
    }

    pub fn bundle_set(&self, label: &str) -> PathBuf {
        self.root.join("bundles").join(label)
    }

    pub fn bundle(&self, label: &str, block: usize, kind: LayerKind) -> PathBuf {
        self.bundle_set(label).join(format!("block{block}.{}", kind.name()))
    }

    pub fn report(&self, ext: &str) -> PathBuf {
        self.root.join(format!("report.{ext}"))
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::io(path, e)
        }
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn load_tensor(path: &Path) -> CliResult<TensorFile> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    Ok(read_tensor(path)?)
}

pub fn store_tensor(path: &Path, tensor: &TensorFile) -> CliResult<()> {
    ensure_parent(path)?;
    Ok(write_tensor(tensor, path)?)
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| ditq::Error::Format(format!("{}: {e}", path.display())).into())
}

pub fn store_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(ditq::Error::from)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}
