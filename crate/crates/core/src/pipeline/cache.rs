use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{file_sha256, sha256_hex};
use crate::error::{Error, Result};

/// A file inside the output directory with its content hash.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StoredFile {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

/// Content-addressed stage outputs under `<outdir>/artifacts/<stage>/<key>/`.
///
/// A stage's key is the hash of everything it depends on (configuration
/// slices and the hashes of its input artifacts), so an existing directory
/// holding every expected file is a valid cache hit.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    outdir: PathBuf,
}

impl ArtifactStore {
    pub fn new(outdir: impl Into<PathBuf>) -> Self {
        Self { outdir: outdir.into() }
    }

    pub fn outdir(&self) -> &Path {
        &self.outdir
    }

    /// First 16 hex digits of the sha256 of the JSON encoding of `material`.
    pub fn key(material: &impl Serialize) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(material)?)[..16].to_string())
    }

    pub fn dir(&self, stage: &str, key: &str) -> PathBuf {
        self.outdir.join("artifacts").join(stage).join(key)
    }

    /// Returns the stage directory, first running `make` into a scratch
    /// directory and moving it into place unless every file in `files` is
    /// already present.
    pub fn ensure(&self, stage: &str, key: &str, files: &[&str], make: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let dir = self.dir(stage, key);
        if files.iter().all(|f| dir.join(f).is_file()) {
            log::debug!("cache hit: {stage}/{key}");
            return Ok(dir);
        }
        log::info!("running stage {stage} ({key})");
        let tmp = dir.with_extension("partial");
        for d in [&tmp, &dir] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        if let Err(e) = make(&tmp) {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        for f in files {
            if !tmp.join(f).is_file() {
                return Err(Error::Format(format!("stage {stage} did not produce {f}")));
            }
        }
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.outdir).unwrap_or(path);
        rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }

    pub fn record(&self, path: &Path) -> Result<StoredFile> {
        Ok(StoredFile { path: self.relative(path), sha256: file_sha256(path)? })
    }
}
