use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::parse::{parse_response, MistranslationTriple};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub request_hash: String,
    pub backend: String,
    pub snapshot: String,
    /// Absent when every attempt failed.
    pub raw_response: Option<String>,
    pub triples: Vec<MistranslationTriple>,
    #[serde(default)]
    pub no_errors: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl AnnotationRecord {
    pub fn is_failed(&self) -> bool {
        self.raw_response.is_none()
    }

    fn check_coherent(&self) -> std::result::Result<(), String> {
        match &self.raw_response {
            None if !self.triples.is_empty() => Err("failed record carries triples".into()),
            None => Ok(()),
            Some(raw) => {
                let parsed = parse_response(raw);
                if parsed.triples != self.triples || parsed.no_errors != self.no_errors {
                    Err("stored triples do not match the raw response".into())
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Cache key: the model snapshot and the exact prompt.
pub fn request_hash(snapshot: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(snapshot.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// Append-only JSON Lines store; later lines for the same key win.
#[derive(Debug)]
pub struct AnnotationCache {
    path: Option<PathBuf>,
    records: HashMap<String, AnnotationRecord>,
}

impl AnnotationCache {
    pub fn in_memory() -> Self {
        Self { path: None, records: HashMap::new() }
    }

    /// Opens (or creates on first write) a cache file. Any line that does not
    /// parse or whose triples do not re-derive from its raw response aborts
    /// the load with the line number.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: AnnotationRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::format(path, format!("corrupt cache entry on line {}: {e}", n + 1)))?;
                record.check_coherent().map_err(|m| {
                    Error::format(path, format!("corrupt cache entry on line {} ({}): {m}", n + 1, record.request_hash))
                })?;
                records.insert(record.request_hash.clone(), record);
            }
        }
        Ok(Self { path: Some(path.to_path_buf()), records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Successful record for `hash`; failed entries do not count as hits.
    pub fn get(&self, hash: &str) -> Option<&AnnotationRecord> {
        self.records.get(hash).filter(|r| !r.is_failed())
    }

    /// Distinct snapshot tags among successful records.
    pub fn snapshots(&self) -> BTreeSet<&str> {
        self.records.values().filter(|r| !r.is_failed()).map(|r| r.snapshot.as_str()).collect()
    }

    /// Appends and flushes before returning, so a crash loses nothing done.
    pub fn insert(&mut self, record: AnnotationRecord) -> Result<()> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut file =
                OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
            let mut line = serde_json::to_string(&record).expect("record serializes");
            line.push('\n');
            file.write_all(line.as_bytes()).and_then(|_| file.flush()).map_err(|e| Error::io(path, e))?;
        }
        self.records.insert(record.request_hash.clone(), record);
        Ok(())
    }
}
