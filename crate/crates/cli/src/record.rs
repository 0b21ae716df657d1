//! `run.json`: resolved config, seeds, version and artifact hashes of one command.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliResult;

pub const RUN_RECORD: &str = "run.json";

pub const VERSION_STR: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("FIGEDIT_GIT_DESCRIBE"));

pub fn version() -> String {
    VERSION_STR.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the stage directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub config: Value,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Every file under `dir` except `run.json`, sorted by path.
pub fn collect_artifacts(dir: &Path) -> CliResult<Vec<Artifact>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| std::io::Error::other(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if rel == RUN_RECORD {
            continue;
        }
        out.push(Artifact { path: rel, bytes: entry.metadata().map_err(|e| std::io::Error::other(e.to_string()))?.len(), sha256: sha256_file(entry.path())? });
    }
    Ok(out)
}

pub fn write_run_record(cfg: &RunConfig, command: &str, dir: &Path) -> CliResult<RunRecord> {
    let record = RunRecord {
        command: command.to_string(),
        version: version(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds().into_iter().collect(),
        config: cfg.to_value(),
        artifacts: collect_artifacts(dir)?,
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RUN_RECORD), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(record)
}

pub fn read_run_record(dir: &Path) -> CliResult<RunRecord> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(RUN_RECORD))?)?)
}
