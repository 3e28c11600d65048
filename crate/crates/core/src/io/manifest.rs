//! Run manifests. Every run writes one first with `complete: false`, then
//! flips it after all artifacts are on disk, so a manifest that is present
//! but incomplete marks an interrupted run.

use crate::inversion::{GuidanceConfig, Method};
use crate::schedule::ScheduleParams;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub spec_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub guidance: GuidanceConfig,
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    /// Artifact paths relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub complete: bool,
}

pub fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// A complete manifest must be able to account for every artifact it lists.
pub fn validate_manifest(m: &RunManifest, base: &Path) -> Result<()> {
    if m.spec_version != SPEC_VERSION {
        return Err(Error::Validation(format!(
            "manifest spec_version {} is not {SPEC_VERSION}",
            m.spec_version
        )));
    }
    for out in &m.outputs {
        if !base.join(out).exists() {
            return Err(Error::Validation(format!(
                "manifest references missing artifact {out}"
            )));
        }
    }
    Ok(())
}
