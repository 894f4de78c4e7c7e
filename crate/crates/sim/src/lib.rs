//! End-to-end scenarios over the simulated entanglement-distribution setup:
//! configuration, acquisition, analysis and the on-disk result tree.

pub mod analysis;
pub mod apparatus;
pub mod bench;
pub mod config;
pub mod manifest;
pub mod output;
pub mod scenarios;

use std::fmt::Display;

use thiserror::Error;

pub use config::{ConfigError, ExperimentConfig, ScenarioKind};
pub use scenarios::{run_scenario, RunOptions, ScenarioOutcome};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl SimError {
    pub fn runtime(e: impl Display) -> Self {
        SimError::Runtime(e.to_string())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        SimError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code: 2 for configuration errors, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) => 2,
            _ => 3,
        }
    }
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(SimError::Config(ConfigError::Parse("x".into())).exit_code(), 2);
        assert_eq!(SimError::runtime("fit").exit_code(), 3);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
