//! Stage bookkeeping: which stages ran, under which config, producing which
//! file contents. A stage only runs when all its prerequisites are fresh.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the config sections the stage reads.
    pub config_hash: String,
    /// Run-relative path → SHA-256 of each file consumed from earlier stages.
    pub inputs: BTreeMap<String, String>,
    /// Run-relative path → SHA-256 of each file written.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Hash of the whole resolved config (run directory excluded).
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let p = run_dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self {
                tool_version: env!("CARGO_PKG_VERSION").into(),
                ..Self::default()
            });
        }
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{} is corrupt: {e}", p.display())))
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), CliError> {
        let p = run_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
    }

    /// Confirms that `stage` ran with the current config and that every file
    /// it wrote is unchanged on disk.
    pub fn check_fresh(&self, run_dir: &Path, stage: &str, config_hash: &str) -> Result<(), CliError> {
        let rec = self
            .stages
            .get(stage)
            .ok_or_else(|| CliError::Validation(format!("prerequisite `{stage}` has not run; run `sidrec {stage}` first")))?;
        if rec.config_hash != config_hash {
            return Err(CliError::Validation(format!(
                "prerequisite `{stage}` ran with a different config; rerun `sidrec {stage}`"
            )));
        }
        for (rel, want) in &rec.outputs {
            let p = run_dir.join(rel);
            let got = if p.exists() { hash_file(&p)? } else { String::from("missing") };
            if &got != want {
                return Err(CliError::Validation(format!(
                    "stale prerequisite: {rel} no longer matches what `{stage}` wrote; rerun `sidrec {stage}`"
                )));
            }
        }
        for (rel, want) in &rec.inputs {
            let p = run_dir.join(rel);
            let got = if p.exists() { hash_file(&p)? } else { String::from("missing") };
            if &got != want {
                return Err(CliError::Validation(format!(
                    "stale prerequisite: `{stage}` consumed an older {rel}; rerun `sidrec {stage}`"
                )));
            }
        }
        Ok(())
    }

    /// Input hashes for a stage about to run: every output of its prerequisites.
    pub fn inputs_of(&self, prereqs: &[&str]) -> BTreeMap<String, String> {
        prereqs
            .iter()
            .filter_map(|s| self.stages.get(*s))
            .flat_map(|r| r.outputs.iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }

    pub fn record(&mut self, run_dir: &Path, stage: &str, config_hash: String, inputs: BTreeMap<String, String>, outputs: &[PathBuf]) -> Result<(), CliError> {
        let mut out = BTreeMap::new();
        for rel in outputs {
            out.insert(rel_str(rel), hash_file(&run_dir.join(rel))?);
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                config_hash,
                inputs,
                outputs: out,
            },
        );
        Ok(())
    }
}

fn rel_str(p: &Path) -> String {
    p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Exclusive ownership of a run directory for the life of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(run_dir).map_err(|e| CliError::Runtime(format!("{}: {e}", run_dir.display())))?;
        let path = run_dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Validation(format!(
                "{} is locked by another process (delete {} if that process is gone)",
                run_dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Runtime(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
