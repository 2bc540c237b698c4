//! Dataset records and corpus loading.
//!
//! Corpora are line-delimited JSON with an explicit schema version. The
//! paper-scale upstream datasets are converted by small adapters outside
//! this crate; tiny hand-built fixture corpora ship in-repo for offline
//! runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::harness::TaskKind;
use crate::SCHEMA_VERSION;

use super::EvalError;

/// Number of source documents a RAG record must carry.
pub const RAG_DOCUMENT_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Profile,
    Biography,
    Rag,
}

impl CorpusKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorpusKind::Profile => "profile",
            CorpusKind::Biography => "biography",
            CorpusKind::Rag => "rag",
        }
    }

    /// Task kinds that make sense against this corpus.
    pub fn supports(&self, task: TaskKind) -> bool {
        match self {
            CorpusKind::Rag => task == TaskKind::RagQuestion,
            _ => task != TaskKind::RagQuestion,
        }
    }
}

/// Ground-truth attribute values for profile and biography records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordAttributes {
    pub gender: String,
    pub birthdate: String,
    pub location: String,
}

impl RecordAttributes {
    pub fn get(&self, kind: TaskKind) -> Option<&str> {
        match kind {
            TaskKind::PiiGender => Some(&self.gender),
            TaskKind::PiiBirthdate => Some(&self.birthdate),
            TaskKind::PiiLocation => Some(&self.location),
            TaskKind::RagQuestion => None,
        }
    }
}

/// One corpus record: a profile/biography text with labeled attributes, or
/// a RAG question over five source documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(rename = "v")]
    pub version: u32,
    pub id: String,
    pub corpus: CorpusKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub documents: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<RecordAttributes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
}

impl DatasetRecord {
    /// The defendable texts: one for profile/biography, five for RAG.
    pub fn texts(&self) -> Vec<&str> {
        match self.corpus {
            CorpusKind::Rag => self
                .documents
                .as_deref()
                .unwrap_or_default()
                .iter()
                .map(String::as_str)
                .collect(),
            _ => self.text.as_deref().into_iter().collect(),
        }
    }

    pub fn ground_truth_for(&self, kind: TaskKind) -> Option<String> {
        match kind {
            TaskKind::RagQuestion => self.reference_answer.clone(),
            _ => self
                .attributes
                .as_ref()
                .and_then(|a| a.get(kind))
                .map(str::to_string),
        }
    }

    fn check(&self, expected: CorpusKind) -> Result<(), String> {
        if self.version != SCHEMA_VERSION {
            return Err(format!(
                "schema version {} does not match expected {SCHEMA_VERSION}",
                self.version
            ));
        }
        if self.id.is_empty() {
            return Err("record id is empty".into());
        }
        if self.corpus != expected {
            return Err(format!(
                "record declares corpus {} but the file was loaded as {}",
                self.corpus.as_str(),
                expected.as_str()
            ));
        }
        match self.corpus {
            CorpusKind::Profile | CorpusKind::Biography => {
                match &self.text {
                    Some(text) if !text.trim().is_empty() => {}
                    _ => return Err("record needs a non-empty text".into()),
                }
                if self.attributes.is_none() {
                    return Err("record needs gender/birthdate/location attributes".into());
                }
            }
            CorpusKind::Rag => {
                let docs = self.documents.as_deref().unwrap_or_default();
                if docs.len() != RAG_DOCUMENT_COUNT {
                    return Err(format!(
                        "rag record needs exactly {RAG_DOCUMENT_COUNT} documents, found {}",
                        docs.len()
                    ));
                }
                if docs.iter().any(|d| d.trim().is_empty()) {
                    return Err("rag documents must be non-empty".into());
                }
                if self.question.is_none() || self.reference_answer.is_none() {
                    return Err("rag record needs question and reference_answer".into());
                }
            }
        }
        Ok(())
    }
}

/// Load and validate one corpus file. Malformed lines abort the load with
/// their line number: partial corpora are worse than loud failures.
pub fn load_corpus(path: &Path, kind: CorpusKind) -> Result<Vec<DatasetRecord>, EvalError> {
    let mut records: Vec<DatasetRecord> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut failure: Option<EvalError> = None;
    crate::util::read_jsonl::<DatasetRecord, _>(path, |line, parsed| {
        if failure.is_some() {
            return Ok(());
        }
        match parsed {
            Ok(record) => {
                if let Err(message) = record.check(kind) {
                    failure = Some(EvalError::Corpus {
                        path: path.to_path_buf(),
                        line,
                        message,
                    });
                } else if !seen.insert(record.id.clone()) {
                    failure = Some(EvalError::Corpus {
                        path: path.to_path_buf(),
                        line,
                        message: format!("duplicate record id {:?}", record.id),
                    });
                } else {
                    records.push(record);
                }
            }
            Err(e) => {
                failure = Some(EvalError::Corpus {
                    path: path.to_path_buf(),
                    line,
                    message: e.to_string(),
                });
            }
        }
        Ok(())
    })
    .map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if let Some(err) = failure {
        return Err(err);
    }
    Ok(records)
}
