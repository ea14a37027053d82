use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_json, sha256_file, write_json};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    /// Stopped at a requested epoch boundary; resumable.
    Partial,
    Complete,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunManifest {
    pub run_id: String,
    pub condition: String,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub sub_seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub dataset_hashes: BTreeMap<String, String>,
    pub tokenizer_fingerprint: String,
    pub code_version: String,
    pub epochs_per_phase: usize,
    pub phase_steps: Vec<u64>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub resumed_from: Option<(usize, usize)>,
    pub phase1_from: Option<String>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }

    /// Errors unless `other` describes the same configuration and data.
    pub fn verify_against(&self, other: &RunManifest) -> Result<()> {
        if self.config_hash != other.config_hash {
            return Err(Error::config(format!(
                "run {} was started with a different configuration (hash {} vs {})",
                self.run_id, self.config_hash, other.config_hash
            )));
        }
        if self.dataset_hashes != other.dataset_hashes || self.tokenizer_fingerprint != other.tokenizer_fingerprint {
            return Err(Error::config(format!(
                "run {}: dataset or tokenizer hashes differ from the manifest",
                self.run_id
            )));
        }
        Ok(())
    }

    /// Records every file under `dir` as an artifact and writes the manifest.
    pub fn finalize(&mut self, dir: &Path) -> Result<()> {
        let mut artifacts = Vec::new();
        for path in files_under(dir)? {
            let rel = relative(dir, &path);
            if rel == MANIFEST {
                continue;
            }
            let bytes = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
            artifacts.push(Artifact { path: rel, bytes, sha256: sha256_file(&path)? });
        }
        self.artifacts = artifacts;
        self.save(dir)
    }
}

fn relative(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .expect("path under base")
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Every regular file under `dir`, sorted.
pub fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct LintReport {
    /// Files no manifest lists.
    pub orphans: Vec<PathBuf>,
    /// Listed artifacts that are absent or whose content changed.
    pub broken: Vec<PathBuf>,
}

impl LintReport {
    pub fn is_clean(&self) -> bool {
        self.orphans.is_empty() && self.broken.is_empty()
    }
}

/// Checks every run directory under `root`'s run collections against its
/// manifest.
pub fn lint(root: &Path) -> Result<LintReport> {
    let mut report = LintReport::default();
    for coll in [root.join("runs"), root.join("sweep").join("runs")] {
        let Ok(entries) = std::fs::read_dir(&coll) else { continue };
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        dirs.sort();
        for dir in dirs {
            if !dir.is_dir() {
                report.orphans.push(dir);
                continue;
            }
            let Ok(m) = RunManifest::load(&dir) else {
                report.orphans.extend(files_under(&dir)?);
                continue;
            };
            let listed: BTreeMap<&str, &Artifact> = m.artifacts.iter().map(|a| (a.path.as_str(), a)).collect();
            let mut seen = BTreeSet::new();
            for f in files_under(&dir)? {
                let rel = relative(&dir, &f);
                if rel == MANIFEST {
                    continue;
                }
                match listed.get(rel.as_str()) {
                    None => report.orphans.push(f),
                    Some(a) => {
                        seen.insert(rel.clone());
                        if sha256_file(&f)? != a.sha256 {
                            report.broken.push(f);
                        }
                    }
                }
            }
            for a in &m.artifacts {
                if !seen.contains(&a.path) {
                    report.broken.push(dir.join(&a.path));
                }
            }
        }
    }
    Ok(report)
}
