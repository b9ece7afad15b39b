use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Fails with a dependency error unless `path` exists.
pub fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Dependency { stage, path })
    }
}

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    /// The full run document; saving it and rerunning the command
    /// reproduces the outputs.
    config: String,
}

/// Records what a command read and wrote, then writes
/// `manifest_<name>.json` into the output directory.
pub struct Recorder<'a> {
    cfg: &'a RunConfig,
    name: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> Recorder<'a> {
    pub fn new(cfg: &'a RunConfig, name: impl Into<String>) -> Self {
        Self {
            cfg,
            name: name.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn inputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.inputs.extend(paths);
    }

    pub fn write(&mut self, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.cfg.out(file);
        write_atomic(&path, bytes)?;
        log::info!("wrote {}", path.display());
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn label(&self, p: &Path) -> String {
        p.strip_prefix(&self.cfg.base_dir).unwrap_or(p).display().to_string()
    }

    fn hashes(&self, paths: &[PathBuf]) -> Result<Vec<FileHash>> {
        paths
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: self.label(p),
                    sha256: sha256_file(p)?,
                })
            })
            .collect()
    }

    pub fn finish(self) -> Result<PathBuf> {
        let manifest = Manifest {
            command: &self.name,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.cfg.seed,
            inputs: self.hashes(&self.inputs)?,
            outputs: self.hashes(&self.outputs)?,
            config: self.cfg.to_toml()?,
        };
        let path = self.cfg.out(&format!("manifest_{}.json", self.name));
        write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
        assert_eq!(
            sha256_file(&p).unwrap(),
            "3fc4ccfe745870e2c0d99f71f30ff0656c8dedd41cc1d7d3d376b0dbe685e2f3"
        );
    }

    #[test]
    fn missing_dependency_names_stage() {
        let err = require(PathBuf::from("/nonexistent/backbone.bin"), "pretrain").unwrap_err();
        assert_eq!(err.kind(), "dependency");
        assert!(err.to_string().contains("pretrain"));
    }
}
