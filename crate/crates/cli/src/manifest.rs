//! Per-stage `manifest.json`: what was read, what was written, and the
//! digest of the configuration that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory when the file lives under it.
    pub path: String,
    pub sha256: String,
    /// Data lines, header excluded for delimited files.
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpstreamRef {
    pub stage: String,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_digest: String,
    pub seed: u64,
    pub upstream: Vec<UpstreamRef>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Chained digest: each stage hashes its upstream digest together with the
/// config sections it reads.
pub fn chain_digest(stage: &str, upstream: Option<&str>, sections: &[(&str, String)]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(upstream.unwrap_or("").as_bytes());
    for (name, value) in sections {
        h.update([0]);
        h.update(name.as_bytes());
        h.update(*b"=");
        h.update(value.as_bytes());
    }
    hex::encode(h.finalize())
}

fn count_rows(path: &Path, bytes: &[u8]) -> usize {
    let lines = bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count();
    let delimited = matches!(path.extension().and_then(|e| e.to_str()), Some("csv" | "tsv"));
    if delimited {
        lines.saturating_sub(1)
    } else {
        lines
    }
}

/// Tracks one stage's file reads and writes.
pub struct Recorder {
    root: PathBuf,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

impl Recorder {
    pub fn new(root: &Path) -> Self {
        Recorder { root: root.to_path_buf(), inputs: Vec::new(), outputs: Vec::new() }
    }

    fn entry(&self, path: &Path, bytes: &[u8]) -> FileEntry {
        let shown = path.strip_prefix(&self.root).unwrap_or(path);
        FileEntry {
            path: shown.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(bytes),
            rows: count_rows(path, bytes),
        }
    }

    pub fn read(&mut self, path: &Path) -> Result<String, Failure> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))?;
        let entry = self.entry(path, text.as_bytes());
        self.inputs.push(entry);
        Ok(text)
    }

    pub fn write(&mut self, path: &Path, text: &str) -> Result<(), Failure> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Failure::Other(format!("cannot create {}: {e}", dir.display())))?;
        }
        std::fs::write(path, text).map_err(|e| Failure::Other(format!("cannot write {}: {e}", path.display())))?;
        let entry = self.entry(path, text.as_bytes());
        self.outputs.push(entry);
        Ok(())
    }

    pub fn finish(self, stage: &str, config_digest: String, seed: u64, upstream: Vec<UpstreamRef>) -> Manifest {
        Manifest { stage: stage.into(), config_digest, seed, upstream, inputs: self.inputs, outputs: self.outputs }
    }
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| Failure::Other(format!("cannot write {}: {e}", path.display())))
    }

    /// Loads `dir/manifest.json` and checks it was produced by `stage` under
    /// the expected digest.
    pub fn require(dir: &Path, stage: &str, expected_digest: &str) -> Result<Manifest, Failure> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|_| {
            Failure::Upstream(format!("no `{stage}` output in {}; run `utirisk {stage}` first", dir.display()))
        })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| {
            Failure::Upstream(format!("unreadable `{stage}` manifest {}: {e}; rerun `utirisk {stage}`", path.display()))
        })?;
        if m.stage != stage || m.config_digest != expected_digest {
            return Err(Failure::Upstream(format!(
                "`{stage}` output in {} was produced under a different configuration; rerun `utirisk {stage}`",
                dir.display()
            )));
        }
        Ok(m)
    }

    pub fn reference(&self) -> UpstreamRef {
        UpstreamRef { stage: self.stage.clone(), config_digest: self.config_digest.clone() }
    }
}
