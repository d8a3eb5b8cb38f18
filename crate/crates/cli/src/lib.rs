//! Library side of the `hypervae` command-line tool: configuration, task
//! loading, the per-command pipelines and run manifests.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod output;
pub mod tasks;

use std::path::Path;

use anyhow::{anyhow, Result};

pub use commands::{run_command, Command, RunOutcome};
pub use config::ExperimentConfig;
pub use manifest::{Manifest, MANIFEST_FILE};

/// A CSV whose hash differs between the original run and its replay.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayMismatch {
    pub path: String,
    pub expected: String,
    /// `None` when the replay did not produce the file.
    pub actual: Option<String>,
}

/// Reruns the command recorded in `manifest` into `out_dir` and compares the
/// hashes of every CSV artifact. Returns the mismatches (empty on success).
pub fn replay(manifest: &Manifest, out_dir: &Path) -> Result<Vec<ReplayMismatch>> {
    let cmd = Command::from_name(&manifest.command).ok_or_else(|| anyhow!("unknown command {:?} in manifest", manifest.command))?;
    let cfg = manifest.config()?;
    let outcome = run_command(cmd, &cfg, out_dir)?;
    let mut out = Vec::new();
    for a in manifest.csv_artifacts() {
        let actual = outcome.manifest.artifacts.iter().find(|b| b.path == a.path).map(|b| b.sha256.clone());
        if actual.as_deref() != Some(a.sha256.as_str()) {
            out.push(ReplayMismatch { path: a.path.clone(), expected: a.sha256.clone(), actual });
        }
    }
    Ok(out)
}
