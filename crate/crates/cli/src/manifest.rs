//! Run manifest: every artifact with its SHA-256.

use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output root, '/'-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub run_id: String,
    pub method: String,
    pub order: Vec<String>,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: Vec<RunEntry>,
    pub reports: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Hashes `rel` (relative to `root`).
pub fn artifact(root: &Path, rel: &str) -> Result<Artifact> {
    Ok(Artifact {
        path: rel.to_string(),
        sha256: sha256_file(&root.join(rel))?,
    })
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(FILE_NAME);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        let m = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Some(m))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(root.join(FILE_NAME), text + "\n")?;
        Ok(())
    }

    /// Replaces any entry with the same run id.
    pub fn record(&mut self, entry: RunEntry) {
        self.runs.retain(|r| r.run_id != entry.run_id);
        self.runs.push(entry);
        self.runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    }

    pub fn complete(&self, run_id: &str) -> Option<&RunEntry> {
        self.runs
            .iter()
            .find(|r| r.run_id == run_id && r.status == RunStatus::Complete)
    }

    /// Re-hashes every listed artifact; returns one line per problem.
    pub fn verify(&self, root: &Path) -> Vec<String> {
        let mut problems = Vec::new();
        let all = self.runs.iter().flat_map(|r| &r.artifacts).chain(&self.reports);
        for a in all {
            match sha256_file(&root.join(&a.path)) {
                Ok(h) if h == a.sha256 => {}
                Ok(h) => problems.push(format!("{}: hash {h} does not match {}", a.path, a.sha256)),
                Err(e) => problems.push(format!("{}: {e:#}", a.path)),
            }
        }
        problems
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "abc").unwrap();
        assert_eq!(
            sha256_file(&dir.path().join("x")).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn verify_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1").unwrap();
        let mut m = Manifest::default();
        m.record(RunEntry {
            run_id: "r".into(),
            method: "finetune".into(),
            order: vec!["copy".into()],
            seed: 0,
            status: RunStatus::Complete,
            error: None,
            artifacts: vec![artifact(dir.path(), "a.csv").unwrap()],
        });
        m.save(dir.path()).unwrap();
        let loaded = Manifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(loaded, m);
        assert!(loaded.verify(dir.path()).is_empty());
        fs::write(dir.path().join("a.csv"), "2").unwrap();
        assert_eq!(loaded.verify(dir.path()).len(), 1);
    }
}
