//! Append-only JSON-lines session log. Each record is keyed by the hash of
//! its fully resolved request, so replaying a record's request yields the
//! same key and the same result hashes.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub endpoint: String,
    pub request: serde_json::Value,
    /// Output name to SHA-256 of its base64 PNG text.
    pub results: Vec<(String, String)>,
    pub created_unix: u64,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct SessionStore {
    path: PathBuf,
    index: Mutex<HashMap<String, SessionRecord>>,
}

impl SessionStore {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut index = HashMap::new();
        if path.exists() {
            let file = std::fs::File::open(path)?;
            for line in std::io::BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<SessionRecord>(&line) {
                    Ok(r) => {
                        index.insert(r.session_id.clone(), r);
                    }
                    Err(e) => log::warn!("skipping unreadable session line: {e}"),
                }
            }
        }
        Ok(Self { path: path.to_path_buf(), index: Mutex::new(index) })
    }

    /// Stores the record unless one with the same id exists; returns the id.
    pub fn record(&self, endpoint: &str, request: serde_json::Value, results: Vec<(String, String)>) -> std::io::Result<String> {
        let key = content_hash(format!("{endpoint}\n{request}").as_bytes());
        let mut index = self.index.lock().expect("session lock");
        if index.contains_key(&key) {
            return Ok(key);
        }
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let rec = SessionRecord { session_id: key.clone(), endpoint: endpoint.to_string(), request, results, created_unix };
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(file, "{}", serde_json::to_string(&rec)?)?;
        index.insert(key.clone(), rec);
        Ok(key)
    }

    pub fn get(&self, id: &str) -> Option<SessionRecord> {
        self.index.lock().expect("session lock").get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.lock().expect("session lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
