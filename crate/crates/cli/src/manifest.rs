//! The run manifest: which cells ran, how they fared, and where every
//! artifact landed.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;

use crate::config::ExperimentConfig;

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed { error: String },
}

/// One procedure × z × repeat slot and what happened to it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CellRecord {
    pub procedure: String,
    pub z: usize,
    pub repeat: usize,
    pub seed: u64,
    pub status: CellStatus,
    pub wall_seconds: f64,
    pub metric_kind: Option<String>,
    pub metric: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Mean wall time per pretraining epoch. Timing lives here rather
    /// than in the results table, which stays byte-deterministic.
    pub seconds_per_epoch: Option<f64>,
}

/// Written at the end of every command, after its artifacts exist.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub created_unix_seconds: u64,
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
    /// Paths relative to the output directory; each exists by the time
    /// the manifest is written.
    pub artifacts: Vec<String>,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            created_unix_seconds: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config: config.clone(),
            cells: Vec::new(),
            artifacts: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn add_artifact(&mut self, relative: impl Into<String>) {
        self.artifacts.push(relative.into());
    }

    pub fn failed_cells(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c.status, CellStatus::Failed { .. }))
            .count()
    }

    /// Serializes to pretty JSON and moves it into place atomically.
    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self).context("serializing manifest")?;
        text.push('\n');
        crate::commands::write_atomic(path, text.as_bytes())
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }

    /// Checks that every artifact path resolves under the output
    /// directory; returns the missing ones.
    pub fn missing_artifacts(&self, output_dir: &Path) -> Vec<PathBuf> {
        self.artifacts
            .iter()
            .map(|rel| output_dir.join(rel))
            .filter(|p| !p.exists())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_through_json() {
        let config = ExperimentConfig::default();
        let mut manifest = RunManifest::new("run-experiment", &config);
        manifest.cells.push(CellRecord {
            procedure: "I-F-FP".to_string(),
            z: 64,
            repeat: 0,
            seed: 7,
            status: CellStatus::Ok,
            wall_seconds: 1.5,
            metric_kind: Some("accuracy".to_string()),
            metric: Some(0.9),
            best_epoch: Some(12),
            seconds_per_epoch: Some(0.07),
        });
        manifest.cells.push(CellRecord {
            procedure: "I-I-PS".to_string(),
            z: 64,
            repeat: 1,
            seed: 8,
            status: CellStatus::Failed {
                error: "diverged at epoch 3".to_string(),
            },
            wall_seconds: 0.4,
            metric_kind: None,
            metric: None,
            best_epoch: None,
            seconds_per_epoch: None,
        });
        manifest.add_artifact("results.csv");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        manifest.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.failed_cells(), 1);
    }

    #[test]
    fn missing_artifacts_are_reported() {
        let config = ExperimentConfig::default();
        let mut manifest = RunManifest::new("run-experiment", &config);
        manifest.add_artifact("present.txt");
        manifest.add_artifact("absent.txt");
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("present.txt"), "x").unwrap();
        let missing = manifest.missing_artifacts(dir.path());
        assert_eq!(missing, vec![dir.path().join("absent.txt")]);
    }
}
