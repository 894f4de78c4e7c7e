//! Result records and the single writer of a run's output tree.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sdm_core::detection::{write_ttag, TimeTag};
use sdm_core::metrics::VisibilityEstimate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{sha256_hex, SimError};

/// Polarization visibilities below this cannot support key distribution.
pub const QKD_THRESHOLD: f64 = 0.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QkdFlag {
    pub threshold: f64,
    pub above_threshold: bool,
}

impl QkdFlag {
    pub fn for_visibility(v: f64) -> Self {
        QkdFlag { threshold: QKD_THRESHOLD, above_threshold: v > QKD_THRESHOLD }
    }
}

/// One scalar result with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub metric: String,
    pub value: f64,
    pub std_error: f64,
    /// SHA-256 of the canonical JSON of the counts the value was computed from.
    pub inputs_hash: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qkd: Option<QkdFlag>,
}

impl Record {
    pub fn new<I: Serialize>(metric: &str, est: VisibilityEstimate, inputs: &I, config_hash: &str) -> Self {
        Record {
            metric: metric.to_string(),
            value: est.value,
            std_error: est.std_error,
            inputs_hash: inputs_hash(inputs),
            config_hash: config_hash.to_string(),
            context: BTreeMap::new(),
            qkd: None,
        }
    }

    /// Record of a polarization visibility; always carries the QKD flag.
    pub fn polarization<I: Serialize>(metric: &str, est: VisibilityEstimate, inputs: &I, config_hash: &str) -> Self {
        Record { qkd: Some(QkdFlag::for_visibility(est.value)), ..Record::new(metric, est, inputs, config_hash) }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.context.insert(key.to_string(), serde_json::to_value(value).expect("context serialises"));
        self
    }
}

pub fn inputs_hash<I: Serialize>(inputs: &I) -> String {
    sha256_hex(serde_json::to_string(inputs).expect("inputs serialise").as_bytes())
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("result serialises");
    s.push('\n');
    s
}

/// Writes files under the run directory and remembers their hashes.
#[derive(Debug)]
pub struct OutputTree {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputTree {
    pub fn create(root: impl AsRef<Path>) -> Result<Self, SimError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| SimError::io(&root, e))?;
        Ok(OutputTree { root, files: BTreeMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Write without recording a hash (used for the manifest itself).
    pub fn write_untracked(&self, rel: &str, bytes: &[u8]) -> Result<(), SimError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
        }
        // Write-then-rename so a crash never leaves a half-written file.
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes).map_err(|e| SimError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| SimError::io(&path, e))
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), SimError> {
        self.write_untracked(rel, bytes)?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), SimError> {
        self.write(rel, to_json(value).as_bytes())
    }

    pub fn write_ttag(&mut self, rel: &str, channel: u16, stream: &[u64]) -> Result<(), SimError> {
        let tags: Vec<TimeTag> = stream.iter().map(|&t| TimeTag::new(t, channel)).collect();
        let mut buf = Vec::with_capacity(14 + 10 * tags.len());
        write_ttag(&mut buf, &tags).map_err(SimError::runtime)?;
        self.write(rel, &buf)
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }
}

/// Plot-ready CSV builder.
#[derive(Debug, Clone, Default)]
pub struct Csv(String);

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut s = header.join(",");
        s.push('\n');
        Csv(s)
    }

    pub fn row(&mut self, fields: &[String]) {
        self.0.push_str(&fields.join(","));
        self.0.push('\n');
    }

    pub fn into_string(self) -> String {
        self.0
    }
}
