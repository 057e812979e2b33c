//! Run manifest: the complete recipe for reproducing a run's outputs.

use crate::error::{CliError, Result};
use pina::sim::{ExperimentConfig, Stage1Summary};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedPrivacy {
    pub noise_multiplier: f64,
    pub delta: f64,
    pub stage1_clip_threshold: f64,
}

/// Written atomically next to the metrics; re-running from the embedded
/// config snapshot reproduces the metrics byte-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub resolved: ResolvedPrivacy,
    pub stage1: Option<Stage1Summary>,
    pub metrics_path: String,
    pub summary_path: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    /// Atomic write: serialize to a sibling temp file, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::runtime(format!("manifest serialization: {e}")))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("manifest {}: {e}", path.display())))
    }
}
