//! One JSON file per session in a data directory.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use slipctl::metrics::Metrics;
use slipctl::tuner::TuningSession;

/// Bumped whenever [`SessionRecord`] changes shape.
pub const SESSION_FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingPreference,
    Simulating,
    Converged,
}

/// Result of simulating one candidate. Traces are not stored; they are
/// reproduced deterministically on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Option<Metrics>,
    /// Why the simulation did not complete, if it did not.
    pub error: Option<String>,
}

impl Evaluation {
    pub fn completed(&self) -> bool {
        self.error.is_none()
    }
}

/// A mutating request already applied, kept so retries are answered without
/// applying it twice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedRequest {
    pub key: String,
    pub route: String,
    pub request: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub schema_version: u32,
    pub id: String,
    pub maneuver: String,
    pub status: Status,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// Comparisons after which the session converges.
    pub max_pairs: usize,
    pub tuner: TuningSession,
    /// Keyed by point index.
    pub evaluations: BTreeMap<usize, Evaluation>,
    pub applied: Vec<AppliedRequest>,
}

impl SessionRecord {
    pub fn applied(&self, route: &str, key: &str) -> Option<&AppliedRequest> {
        self.applied.iter().find(|a| a.route == route && a.key == key)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("session file {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("session file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Clone, Debug)]
pub struct Store {
    dir: PathBuf,
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(|source| StoreError::Io { path: dir.to_path_buf(), source })?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    /// Writes through a temporary file so a crash never leaves a torn file.
    pub fn save(&self, rec: &SessionRecord) -> Result<(), StoreError> {
        let path = self.path(&rec.id);
        let tmp = self.dir.join(format!(".{}.json.tmp", rec.id));
        let text = serde_json::to_string_pretty(rec).expect("session record serializes");
        let io_err = |source| StoreError::Io { path: path.clone(), source };
        fs::write(&tmp, text).map_err(io_err)?;
        fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<SessionRecord, StoreError> {
        let text = fs::read_to_string(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
        let format = |message: String| StoreError::Format { path: path.to_path_buf(), message };
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| format(e.to_string()))?;
        let found = v.get("schema_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
        if found != u64::from(SESSION_FILE_VERSION) {
            return Err(format(format!("schema version {found}, expected {SESSION_FILE_VERSION}")));
        }
        serde_json::from_value(v).map_err(|e| format(e.to_string()))
    }

    /// Every readable session file; unreadable ones are returned as errors
    /// alongside so the caller can report them.
    pub fn load_all(&self) -> (Vec<SessionRecord>, Vec<StoreError>) {
        let mut ok = Vec::new();
        let mut bad = Vec::new();
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(source) => return (ok, vec![StoreError::Io { path: self.dir.clone(), source }]),
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect();
        paths.sort();
        for p in paths {
            match self.load(&p) {
                Ok(r) => ok.push(r),
                Err(e) => bad.push(e),
            }
        }
        (ok, bad)
    }
}
