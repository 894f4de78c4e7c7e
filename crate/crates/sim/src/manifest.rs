//! The run manifest: what was run, with which configuration, and what it found.
//!
//! It is written before any result file (status `running`) and rewritten at
//! the end with the delays found and the hashes of every result file.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use sdm_core::detection::DetectorModel;
use serde::{Deserialize, Serialize};

use crate::analysis::PairDelay;
use crate::config::{ExperimentConfig, ScenarioKind};
use crate::output::{to_json, OutputTree};
use crate::{sha256_hex, SimError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Delays found in one acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionDelays {
    pub acquisition: String,
    pub delays: Vec<PairDelay>,
    /// Per-channel offsets relative to the lowest channel of each connected group.
    pub channel_offsets_ps: BTreeMap<u16, i64>,
}

/// Execution timestamps. Simulated time always; wall-clock only on request,
/// since it would break bit-identical reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub simulated_start_s: f64,
    pub simulated_end_s: f64,
    pub simulated_acquisition_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_start_unix_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_end_unix_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: String,
    pub version: String,
    pub scenario: ScenarioKind,
    pub seed: u64,
    /// SHA-256 of `config.json`.
    pub config_hash: String,
    pub coincidence_window_ps: u64,
    pub detectors: DetectorModel,
    pub status: RunStatus,
    pub timestamps: Timestamps,
    pub channels: BTreeMap<u16, String>,
    pub delays: Vec<AcquisitionDelays>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Relative path → SHA-256 of every result file.
    pub results: BTreeMap<String, String>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, wall_clock: bool) -> Self {
        RunManifest {
            software: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            scenario: cfg.scenario.kind,
            seed: cfg.scenario.seed,
            config_hash: sha256_hex(cfg.canonical_json().as_bytes()),
            coincidence_window_ps: cfg.scenario.coincidence_window_ps,
            detectors: cfg.detectors,
            status: RunStatus::Running,
            timestamps: Timestamps {
                simulated_start_s: 0.0,
                simulated_end_s: 0.0,
                simulated_acquisition_s: 0.0,
                wall_clock_start_unix_s: wall_clock.then(unix_now),
                wall_clock_end_unix_s: None,
            },
            channels: BTreeMap::new(),
            delays: Vec::new(),
            warnings: Vec::new(),
            error: None,
            results: BTreeMap::new(),
        }
    }

    /// Write `config.json` and the initial manifest.
    pub fn start(&self, cfg: &ExperimentConfig, out: &OutputTree) -> Result<(), SimError> {
        out.write_untracked(CONFIG_FILE, cfg.canonical_json().as_bytes())?;
        out.write_untracked(MANIFEST_FILE, to_json(self).as_bytes())
    }

    pub fn finish(&mut self, out: &OutputTree, status: RunStatus) -> Result<(), SimError> {
        self.status = status;
        self.results = out.files().clone();
        if self.timestamps.wall_clock_start_unix_s.is_some() {
            self.timestamps.wall_clock_end_unix_s = Some(unix_now());
        }
        out.write_untracked(MANIFEST_FILE, to_json(self).as_bytes())
    }
}

/// Check a finished run directory: config hash and every result hash match.
pub fn verify_run_dir(dir: &std::path::Path) -> Result<RunManifest, String> {
    let read = |rel: &str| std::fs::read(dir.join(rel)).map_err(|e| format!("{rel}: {e}"));
    let m: RunManifest = serde_json::from_slice(&read(MANIFEST_FILE)?).map_err(|e| e.to_string())?;
    if sha256_hex(&read(CONFIG_FILE)?) != m.config_hash {
        return Err("config hash mismatch".into());
    }
    for (rel, h) in &m.results {
        if &sha256_hex(&read(rel)?) != h {
            return Err(format!("hash mismatch for {rel}"));
        }
    }
    Ok(m)
}
