//! Key-value config files and run manifests.
//!
//! Config format: one `key=value` per line, `#` starts a comment, blank
//! lines ignored. A manifest is the same format, holding every resolved
//! setting plus SHA-256 hashes of the artifacts a run read or wrote, so
//! the run can be reproduced from the manifest alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: expected key=value, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("missing key {0:?}")]
    MissingKey(String),
    #[error("key {key:?}: cannot parse {value:?} as {wanted}")]
    BadValue { key: String, value: String, wanted: &'static str },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Parsed key-value file; keys keep insertion lookup via a sorted map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    pub entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ManifestError::BadLine { line: i + 1, text: raw.to_string() })?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(ManifestError::DuplicateKey { line: i + 1, key });
            }
        }
        Ok(KvFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, ManifestError> {
        self.get(key).ok_or_else(|| ManifestError::MissingKey(key.to_string()))
    }

    pub fn parse_value<T: std::str::FromStr>(
        &self,
        key: &str,
        wanted: &'static str,
    ) -> Result<Option<T>, ManifestError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ManifestError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                wanted,
            }),
        }
    }
}

/// Resolved settings and artifact hashes for one run.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    /// (key, value), in the order they were recorded.
    pub settings: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Manifest::default();
        m.set("command", command);
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.settings.push((key.to_string(), value.to_string()));
    }

    /// Records `artifact.<label>` as the SHA-256 of the file at `path`.
    pub fn hash_artifact(&mut self, label: &str, path: &Path) -> Result<(), ManifestError> {
        let bytes = std::fs::read(path)?;
        self.set(&format!("artifact.{label}"), sha256_hex(&bytes));
        self.set(&format!("artifact.{label}.path"), path.display().to_string());
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# run manifest\n");
        for (k, v) in &self.settings {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}
