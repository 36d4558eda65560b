//! Run manifest: per-stage input and output hashes, parameters and a short
//! summary. Stages whose inputs and parameters are unchanged are skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Input path → sha256.
    pub inputs: BTreeMap<String, String>,
    pub parameters: Value,
    /// Output path relative to the output directory → sha256.
    pub outputs: BTreeMap<String, String>,
    pub summary: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION,
            stages: BTreeMap::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&io::read_bytes(path)?))
}

/// Per-stage seed derived from the root seed by hashing (root, stage).
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Files and summary produced by one stage.
#[derive(Debug, Default)]
pub struct StageOutput {
    /// Paths relative to the output directory.
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub skipped: bool,
    pub record: StageRecord,
}

impl Manifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(MANIFEST_FILE)
    }

    pub fn load(out_dir: &Path) -> Result<Self> {
        let path = Self::path(out_dir);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = io::read_text(&path)?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(CliError::Config(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        io::write_json(&Self::path(out_dir), self)
    }

    /// Runs `body` unless the stage is already recorded with the same inputs
    /// and parameters and its outputs are intact on disk.
    pub fn run_stage<F>(
        &mut self,
        out_dir: &Path,
        stage: &str,
        inputs: &[PathBuf],
        parameters: Value,
        body: F,
    ) -> Result<StageResult>
    where
        F: FnOnce() -> Result<StageOutput>,
    {
        let mut hashed = BTreeMap::new();
        for p in inputs {
            hashed.insert(input_key(out_dir, p), sha256_file(p)?);
        }
        if let Some(prev) = self.stages.get(stage) {
            if prev.inputs == hashed
                && prev.parameters == parameters
                && outputs_intact(out_dir, prev)
            {
                return Ok(StageResult {
                    skipped: true,
                    record: prev.clone(),
                });
            }
        }
        let out = body().map_err(|e| e.in_stage(stage))?;
        let mut outputs = BTreeMap::new();
        for (name, bytes) in &out.files {
            io::write_atomic(&out_dir.join(name), bytes).map_err(|e| e.in_stage(stage))?;
            outputs.insert(name.clone(), sha256_hex(bytes));
        }
        let record = StageRecord {
            inputs: hashed,
            parameters,
            outputs,
            summary: out.summary,
        };
        self.stages.insert(stage.to_string(), record.clone());
        self.save(out_dir)?;
        Ok(StageResult {
            skipped: false,
            record,
        })
    }

    /// Path of a recorded output after checking its hash.
    pub fn verified_output(&self, out_dir: &Path, stage: &str, name: &str) -> Result<PathBuf> {
        let record = self
            .stages
            .get(stage)
            .ok_or_else(|| CliError::Config(format!("stage `{stage}` has not been run")))?;
        let expected = record.outputs.get(name).ok_or_else(|| {
            CliError::Config(format!(
                "`{name}` is not a hashed output of stage `{stage}`"
            ))
        })?;
        let path = out_dir.join(name);
        let actual = sha256_file(&path)?;
        if &actual != expected {
            return Err(CliError::Io {
                path,
                message: "contents do not match the manifest hash".into(),
            });
        }
        Ok(path)
    }

    /// First output of a stage whose name ends with `suffix`.
    pub fn output_named(&self, stage: &str, suffix: &str) -> Option<String> {
        self.stages
            .get(stage)?
            .outputs
            .keys()
            .find(|k| k.ends_with(suffix))
            .cloned()
    }
}

/// Inputs inside the output directory are keyed relative to it so that
/// manifests do not depend on where the run lives.
fn input_key(out_dir: &Path, p: &Path) -> String {
    p.strip_prefix(out_dir).unwrap_or(p).display().to_string()
}

fn outputs_intact(out_dir: &Path, record: &StageRecord) -> bool {
    record
        .outputs
        .iter()
        .all(|(name, hash)| sha256_file(&out_dir.join(name)).is_ok_and(|h| &h == hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::cell::Cell;

    #[test]
    fn stage_seeds_differ_and_repeat() {
        assert_eq!(stage_seed(7, "simulate"), stage_seed(7, "simulate"));
        assert_ne!(stage_seed(7, "simulate"), stage_seed(7, "sweep"));
        assert_ne!(stage_seed(7, "simulate"), stage_seed(8, "simulate"));
    }

    #[test]
    fn unchanged_stage_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let calls = Cell::new(0);
        let body = || {
            calls.set(calls.get() + 1);
            Ok(StageOutput {
                files: vec![("a.txt".into(), b"hello".to_vec())],
                summary: json!({"n": 1}),
            })
        };
        let mut m = Manifest::default();
        let first = m
            .run_stage(dir.path(), "s", &[], json!({"k": 1}), body)
            .unwrap();
        let second = m
            .run_stage(dir.path(), "s", &[], json!({"k": 1}), body)
            .unwrap();
        assert!(!first.skipped && second.skipped);
        assert_eq!(calls.get(), 1);
        // new parameters rerun
        m.run_stage(dir.path(), "s", &[], json!({"k": 2}), body)
            .unwrap();
        assert_eq!(calls.get(), 2);
        // a tampered output reruns
        std::fs::write(dir.path().join("a.txt"), b"changed").unwrap();
        m.run_stage(dir.path(), "s", &[], json!({"k": 2}), body)
            .unwrap();
        assert_eq!(calls.get(), 3);
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn verified_output_rejects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::default();
        m.run_stage(dir.path(), "s", &[], Value::Null, || {
            Ok(StageOutput {
                files: vec![("a.txt".into(), b"x".to_vec())],
                summary: Value::Null,
            })
        })
        .unwrap();
        assert!(m.verified_output(dir.path(), "s", "a.txt").is_ok());
        assert!(m.verified_output(dir.path(), "s", "b.txt").is_err());
        assert!(m.verified_output(dir.path(), "t", "a.txt").is_err());
        std::fs::write(dir.path().join("a.txt"), b"y").unwrap();
        assert!(matches!(
            m.verified_output(dir.path(), "s", "a.txt"),
            Err(CliError::Io { .. })
        ));
    }
}
