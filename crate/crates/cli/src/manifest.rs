//! Run ledger: per-stage manifests with content hashes, so every stage
//! can verify its inputs and every artifact's provenance is recoverable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::CliError;

pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    /// Volatile artifacts (wall-clock measurements) are excluded from
    /// determinism guarantees.
    #[serde(default)]
    pub volatile: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    pub duration_ms: u128,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct Ledger {
    pub entries: Vec<StageManifest>,
}

impl Ledger {
    pub fn load(out_dir: &Path) -> Result<Ledger, CliError> {
        let path = out_dir.join(LEDGER_FILE);
        if !path.exists() {
            return Ok(Ledger::default());
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Artifact(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Artifact(format!("corrupt ledger {}: {e}", path.display())))
    }

    pub fn append_and_save(&mut self, out_dir: &Path, manifest: StageManifest) -> Result<(), CliError> {
        self.entries.push(manifest);
        let path = out_dir.join(LEDGER_FILE);
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Artifact(format!("ledger serialization: {e}")))?;
        std::fs::write(&path, json)
            .map_err(|e| CliError::Artifact(format!("cannot write {}: {e}", path.display())))
    }

    /// The most recent manifest of a stage, if it ran.
    pub fn latest(&self, stage: &str) -> Option<&StageManifest> {
        self.entries.iter().rev().find(|m| m.stage == stage)
    }

    /// Latest recorded output hash for a relative path.
    pub fn recorded_output(&self, rel_path: &str) -> Option<(&StageManifest, &ArtifactRef)> {
        self.entries.iter().rev().find_map(|m| {
            m.outputs
                .iter()
                .find(|a| a.path == rel_path)
                .map(|a| (m, a))
        })
    }
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Artifact(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

pub fn artifact_ref(out_dir: &Path, rel: &str, volatile: bool) -> Result<ArtifactRef, CliError> {
    Ok(ArtifactRef {
        path: rel.to_string(),
        sha256: file_sha256(&out_dir.join(rel))?,
        volatile,
    })
}

/// Verifies that a required input exists, was produced by `producer`, and
/// still matches its recorded hash. Returns the validated reference.
pub fn require_input(
    ledger: &Ledger,
    out_dir: &Path,
    rel: &str,
    producer: &str,
    config_hash: &str,
) -> Result<ArtifactRef, CliError> {
    let Some((manifest, recorded)) = ledger.recorded_output(rel) else {
        return Err(CliError::Artifact(format!(
            "missing artifact {rel}: run the {producer} stage first"
        )));
    };
    if manifest.config_hash != config_hash {
        return Err(CliError::Artifact(format!(
            "artifact {rel} was produced under a different configuration; rerun {producer}"
        )));
    }
    let path = out_dir.join(rel);
    if !path.exists() {
        return Err(CliError::Artifact(format!(
            "missing artifact {rel}: run the {producer} stage first"
        )));
    }
    if recorded.volatile {
        return Ok(recorded.clone());
    }
    let actual = file_sha256(&path)?;
    if actual != recorded.sha256 {
        return Err(CliError::Artifact(format!(
            "artifact {rel} does not match the hash recorded by {producer}; rerun {producer}"
        )));
    }
    Ok(recorded.clone())
}

#[derive(Debug, Default)]
pub struct OutputCollector {
    out_dir: PathBuf,
    refs: Vec<ArtifactRef>,
}

impl OutputCollector {
    pub fn new(out_dir: &Path) -> Self {
        OutputCollector {
            out_dir: out_dir.to_path_buf(),
            refs: Vec::new(),
        }
    }

    pub fn add(&mut self, rel: &str) -> Result<(), CliError> {
        let r = artifact_ref(&self.out_dir, rel, false)?;
        self.refs.push(r);
        Ok(())
    }

    pub fn add_volatile(&mut self, rel: &str) -> Result<(), CliError> {
        let r = artifact_ref(&self.out_dir, rel, true)?;
        self.refs.push(r);
        Ok(())
    }

    pub fn finish(self) -> Vec<ArtifactRef> {
        self.refs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let mut ledger = Ledger::default();
        std::fs::write(dir.path().join("a.bin"), b"hello").unwrap();
        let r = artifact_ref(dir.path(), "a.bin", false).unwrap();
        ledger
            .append_and_save(
                dir.path(),
                StageManifest {
                    stage: "preprocess".into(),
                    config_hash: "cfg".into(),
                    seeds: vec![("synth".into(), 1)],
                    inputs: vec![],
                    outputs: vec![r],
                    duration_ms: 3,
                },
            )
            .unwrap();
        let loaded = Ledger::load(dir.path()).unwrap();
        assert_eq!(loaded.entries.len(), 1);
        assert!(loaded.latest("preprocess").is_some());
        assert!(loaded.recorded_output("a.bin").is_some());

        // valid input passes
        require_input(&loaded, dir.path(), "a.bin", "preprocess", "cfg").unwrap();
        // config change is rejected
        let err = require_input(&loaded, dir.path(), "a.bin", "preprocess", "other").unwrap_err();
        assert!(err.to_string().contains("different configuration"));
        // tampering is rejected
        std::fs::write(dir.path().join("a.bin"), b"tampered").unwrap();
        let err = require_input(&loaded, dir.path(), "a.bin", "preprocess", "cfg").unwrap_err();
        assert!(err.to_string().contains("rerun preprocess"));
    }

    #[test]
    fn missing_artifact_names_the_stage_to_run() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = Ledger::default();
        let err = require_input(&ledger, dir.path(), "selector.bin", "build-router", "cfg")
            .unwrap_err();
        assert!(err.to_string().contains("build-router"));
    }
}
