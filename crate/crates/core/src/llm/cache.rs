use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::text::sha256_hex;

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    score: f64,
}

/// Append-only JSONL cache of scoring results keyed by content hash.
///
/// Concurrent writers of the same key write identical values, so the last
/// writer winning is harmless.
pub struct ScoreCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, f64>>,
    file: Mutex<File>,
}

impl ScoreCache {
    pub const FILE_NAME: &'static str = "scores.jsonl";

    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        let err = |e: std::io::Error| BackendError::Cache(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(err)?;
        let path = dir.join(Self::FILE_NAME);
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(err)?);
            for line in reader.lines() {
                let line = line.map_err(err)?;
                // A torn trailing line from an interrupted run is ignored.
                if let Ok(e) = serde_json::from_str::<Entry>(&line) {
                    entries.insert(e.key, e.score);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(err)?;
        Ok(Self {
            path,
            entries: Mutex::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn key(model: &str, prefix: &str, continuation: &str) -> String {
        let mut buf = Vec::with_capacity(model.len() + prefix.len() + continuation.len() + 2);
        buf.extend_from_slice(model.as_bytes());
        buf.push(0);
        buf.extend_from_slice(prefix.as_bytes());
        buf.push(0);
        buf.extend_from_slice(continuation.as_bytes());
        sha256_hex(&buf)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.lock().unwrap().get(key).copied()
    }

    pub fn put(&self, key: String, score: f64) -> Result<(), BackendError> {
        let line = serde_json::to_string(&Entry {
            key: key.clone(),
            score,
        })
        .map_err(|e| BackendError::Cache(e.to_string()))?;
        {
            let mut f = self.file.lock().unwrap();
            writeln!(f, "{line}").map_err(|e| BackendError::Cache(e.to_string()))?;
        }
        self.entries.lock().unwrap().insert(key, score);
        Ok(())
    }
}
