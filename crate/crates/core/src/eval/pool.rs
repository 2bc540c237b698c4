//! Pools of previously accepted defenses, reused on unseen texts.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::defense::Defense;
use crate::harness::TaskKind;
use crate::util::{append_jsonl, read_jsonl};
use crate::SCHEMA_VERSION;

use super::EvalError;

/// One accepted defense with its generation provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    #[serde(rename = "v")]
    pub version: u32,
    pub defense: Defense,
    /// Id of the text the defense was generated against. Transfer runs
    /// must never evaluate a defense on its own generation text.
    pub source_text_id: String,
    pub source_task: TaskKind,
    pub generator_model: String,
    pub attacker_model: String,
    pub judge_model: String,
    pub rating: u8,
}

impl PoolEntry {
    pub fn new(
        defense: Defense,
        source_text_id: impl Into<String>,
        source_task: TaskKind,
        generator_model: impl Into<String>,
        attacker_model: impl Into<String>,
        judge_model: impl Into<String>,
        rating: u8,
    ) -> Self {
        PoolEntry {
            version: SCHEMA_VERSION,
            defense,
            source_text_id: source_text_id.into(),
            source_task,
            generator_model: generator_model.into(),
            attacker_model: attacker_model.into(),
            judge_model: judge_model.into(),
            rating,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DefensePool {
    pub entries: Vec<PoolEntry>,
}

impl DefensePool {
    /// Load a pool, checking that every entry was accepted at generation
    /// time (rating at or above `threshold`).
    pub fn load(path: &Path, threshold: u8) -> Result<Self, EvalError> {
        let mut entries = Vec::new();
        let mut failure: Option<EvalError> = None;
        read_jsonl::<PoolEntry, _>(path, |line, parsed| {
            if failure.is_some() {
                return Ok(());
            }
            match parsed {
                Ok(entry) => {
                    if entry.rating < threshold {
                        failure = Some(EvalError::Pool(format!(
                            "{path:?} line {line}: entry rated {} below acceptance threshold {threshold}",
                            entry.rating
                        )));
                    } else {
                        entries.push(entry);
                    }
                }
                Err(e) => {
                    failure = Some(EvalError::Pool(format!("{path:?} line {line}: {e}")));
                }
            }
            Ok(())
        })
        .map_err(|e| EvalError::Io { path: path.to_path_buf(), source: e })?;
        if let Some(err) = failure {
            return Err(err);
        }
        Ok(DefensePool { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| EvalError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        }
        let file = File::create(path).map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut writer = BufWriter::new(file);
        for entry in &self.entries {
            append_jsonl(&mut writer, entry).map_err(|e| EvalError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        }
        Ok(())
    }

    pub fn source_ids(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .map(|e| e.source_text_id.as_str())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}
