//! Content-addressed response cache.
//!
//! Records live in `exchanges.jsonl` under the cache directory, one JSON
//! object per line, keyed by a hash of everything that determines the
//! output distribution. Duplicate appends for the same key carry identical
//! values, so concurrent last-writer-wins is benign.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::util::{content_hash, read_jsonl};
use crate::SCHEMA_VERSION;

use super::provider::ModelSpec;

const CACHE_FILE: &str = "exchanges.jsonl";

/// Cache key over exactly the arguments that determine the response
/// distribution: provider, model, temperature, seed and both prompts.
pub fn cache_key(spec: &ModelSpec, system: &str, user: &str) -> String {
    let seed = spec
        .seed
        .map(|s| s.to_string())
        .unwrap_or_else(|| "none".to_string());
    let material = [
        spec.provider.as_str(),
        &spec.model,
        &format!("{}", spec.temperature),
        &seed,
        system,
        user,
    ]
    .join("\u{1f}");
    content_hash(material.as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CachedExchange {
    #[serde(rename = "v")]
    pub version: u32,
    pub key: String,
    pub response_text: String,
    #[serde(default)]
    pub refused: bool,
    #[serde(default)]
    pub truncated: bool,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl CachedExchange {
    pub fn new(
        key: String,
        response_text: String,
        refused: bool,
        truncated: bool,
        tokens_in: u64,
        tokens_out: u64,
    ) -> Self {
        CachedExchange {
            version: SCHEMA_VERSION,
            key,
            response_text,
            refused,
            truncated,
            tokens_in,
            tokens_out,
        }
    }
}

pub struct ResponseCache {
    map: Mutex<HashMap<String, CachedExchange>>,
    file: Mutex<BufWriter<File>>,
}

impl ResponseCache {
    /// Open (creating if needed) the cache under `dir` and load existing
    /// records. Unparseable lines are skipped with a warning rather than
    /// failing the run.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut map = HashMap::new();
        if path.exists() {
            read_jsonl::<CachedExchange, _>(&path, |line_no, parsed| {
                match parsed {
                    Ok(rec) => {
                        map.insert(rec.key.clone(), rec);
                    }
                    Err(e) => {
                        log::warn!("skipping corrupt cache line {line_no} in {path:?}: {e}");
                    }
                }
                Ok(())
            })?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(ResponseCache {
            map: Mutex::new(map),
            file: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn get(&self, key: &str) -> Option<CachedExchange> {
        self.map.lock().expect("cache lock").get(key).cloned()
    }

    pub fn put(&self, record: CachedExchange) -> std::io::Result<()> {
        {
            let mut file = self.file.lock().expect("cache file lock");
            let line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            file.flush()?;
        }
        self.map
            .lock()
            .expect("cache lock")
            .insert(record.key.clone(), record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
