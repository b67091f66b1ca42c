//! Output layout and provenance sidecars.
//!
//! Each artifact `X` is accompanied by `X.meta.json`, recording the hash of
//! the experiment configuration, the hash of the prepared data, the SHA-256
//! of `X` itself and of every input it was derived from. Commands check the
//! sidecars of their inputs before using them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::difficulty::Criterion;
use crate::error::{Error, Result};
use crate::scheduler::ScheduleMode;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub kind: String,
    pub config_hash: String,
    pub data_hash: String,
    pub sha256: String,
    /// Input file name to its SHA-256 at the time of use.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Free-form details (criterion, token level, raw scores, ...).
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

impl ArtifactMeta {
    pub fn new(kind: &str, config_hash: &str, data_hash: &str) -> Self {
        Self {
            kind: kind.into(),
            config_hash: config_hash.into(),
            data_hash: data_hash.into(),
            sha256: String::new(),
            inputs: BTreeMap::new(),
            details: BTreeMap::new(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let parent = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|p| format!("{}/", p.to_string_lossy()))
            .unwrap_or_default();
        self.inputs.insert(parent + &name, file_sha256(path)?);
        Ok(self)
    }

    pub fn detail(mut self, key: &str, value: impl Serialize) -> Self {
        self.details.insert(key.into(), serde_json::to_value(value).expect("detail serializes"));
        self
    }

    /// Hashes the finished artifact and writes the sidecar next to it.
    pub fn write_for(mut self, artifact: &Path) -> Result<Self> {
        self.sha256 = file_sha256(artifact)?;
        let path = meta_path(artifact);
        let json = serde_json::to_string_pretty(&self).expect("meta serializes") + "\n";
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(self)
    }

    pub fn read_for(artifact: &Path) -> Result<Self> {
        let path = meta_path(artifact);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Reads the sidecar of `artifact`, checks that the file still matches it
    /// and that it was built from the same data.
    pub fn verify(artifact: &Path, data_hash: Option<&str>) -> Result<Self> {
        let meta = Self::read_for(artifact)?;
        let actual = file_sha256(artifact)?;
        if actual != meta.sha256 {
            return Err(Error::Incompatible(format!(
                "{} changed after it was written (sha256 {actual}, recorded {})",
                artifact.display(),
                meta.sha256
            )));
        }
        if let Some(expected) = data_hash {
            if meta.data_hash != expected {
                return Err(Error::Incompatible(format!(
                    "{} was built from data {} but the current configuration yields data {expected}",
                    artifact.display(),
                    meta.data_hash
                )));
            }
        }
        Ok(meta)
    }
}

/// Paths inside an experiment's output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data_dir(&self) -> Result<PathBuf> {
        self.dir("data")
    }

    pub fn vanilla_checkpoint(&self) -> Result<PathBuf> {
        Ok(self.dir("vanilla")?.join("model.ckpt"))
    }

    pub fn vanilla_curve(&self) -> Result<PathBuf> {
        Ok(self.dir("vanilla")?.join("dev_bleu.csv"))
    }

    pub fn scores(&self, criterion: Criterion) -> Result<PathBuf> {
        Ok(self.dir("scores")?.join(format!("{criterion}.tsv")))
    }

    pub fn manifest(&self) -> Result<PathBuf> {
        Ok(self.dir("split")?.join("manifest.json"))
    }

    pub fn cl_dir(&self, mode: ScheduleMode) -> Result<PathBuf> {
        self.dir(&format!("cl-{mode}"))
    }

    pub fn baseline_dir(&self) -> Result<PathBuf> {
        self.dir("baseline")
    }

    pub fn report_dir(&self) -> Result<PathBuf> {
        self.dir("report")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_detects_tampering_and_foreign_data() {
        let dir = tempfile::tempdir().unwrap();
        let up = dir.path().join("up.txt");
        fs::write(&up, "upstream").unwrap();
        let art = dir.path().join("a.tsv");
        fs::write(&art, "payload").unwrap();
        let meta = ArtifactMeta::new("scores", "cfg", "data1")
            .input(&up)
            .unwrap()
            .detail("criterion", "recovery")
            .write_for(&art)
            .unwrap();
        assert_eq!(meta_path(&art), dir.path().join("a.tsv.meta.json"));
        let back = ArtifactMeta::verify(&art, Some("data1")).unwrap();
        assert_eq!(back, meta);
        assert_eq!(back.sha256, sha256_hex(b"payload"));
        assert!(back.inputs.values().any(|h| *h == sha256_hex(b"upstream")));

        assert!(matches!(ArtifactMeta::verify(&art, Some("data2")), Err(Error::Incompatible(_))));
        fs::write(&art, "tampered").unwrap();
        assert!(matches!(ArtifactMeta::verify(&art, None), Err(Error::Incompatible(_))));
    }
}
