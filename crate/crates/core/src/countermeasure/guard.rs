//! Injection-detecting classifier interface.
//!
//! Two implementations: an offline heuristic surrogate built from pattern
//! rules for common injection markers, and a client for a user-supplied
//! remote classifier endpoint. The surrogate's false-positive behavior on
//! ordinary text is intentional and measurable.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// Pattern rules for the offline surrogate: role-play phrases,
/// ignore-previous directives, bracketed rating markers, language-switch
/// directives, and the vague fake-answer phrasings injections lean on.
const SURROGATE_PATTERNS: &[&str] = &[
    r"(?i)\bignore\s+(any\s+|all\s+)?(other|previous|prior)\s+(questions?|instructions?|prompts?)",
    r"(?i)\bdo not answer any other question",
    r"(?i)\byou are now\b|\bpretend (to be|you are)\b|\bact as\b",
    r"\[\[\s*\d+\s*\]\]",
    r"(?i)\b(respond|answer|reply)\s+(only\s+)?in\s+(spanish|german|french|hindi|welsh|japanese|mandarin|chinese|italian|portuguese|russian|arabic|korean|dutch|turkish)\b",
    r"(?i)\b(previous|above|original)\s+question\s+(has been|was|is)\s+(answered|addressed|resolved)",
    r"(?i)cannot be answered with the (provided|available|given) information",
    r"(?i)this question cannot be answered",
    r"(?i)\b(count|identify|provide|summari[sz]e|how many|list)\b[^.?!]{0,60}\b(sentences?|adjectives?|verbs?|nouns?|themes?|sentiment|writing style|word count)\b",
    r"(?i)\bsentiment analysis\b",
];

fn surrogate_set() -> &'static regex::RegexSet {
    static SET: OnceLock<regex::RegexSet> = OnceLock::new();
    SET.get_or_init(|| {
        regex::RegexSet::new(SURROGATE_PATTERNS).expect("surrogate patterns compile")
    })
}

/// The offline heuristic classifier.
#[derive(Debug, Clone, Copy, Default)]
pub struct SurrogateGuard;

impl SurrogateGuard {
    pub fn flagged(&self, sentence: &str) -> bool {
        surrogate_set().is_match(sentence)
    }
}

/// Which classifier backs the `guard_classifier` countermeasure.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuardDetector {
    #[default]
    Surrogate,
    /// POSTs `{"text": "<sentence>"}` and expects `{"flagged": bool}`.
    Remote { endpoint: String },
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponse {
    flagged: bool,
}

fn remote_client() -> &'static reqwest::blocking::Client {
    static CLIENT: OnceLock<reqwest::blocking::Client> = OnceLock::new();
    CLIENT.get_or_init(|| {
        reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(30))
            .build()
            .expect("HTTP client builds")
    })
}

impl GuardDetector {
    /// Classify one sentence. An `Err` carries the reason the caller
    /// should degrade the countermeasure rather than silently pass.
    pub fn flagged(&self, sentence: &str) -> Result<bool, String> {
        match self {
            GuardDetector::Surrogate => Ok(SurrogateGuard.flagged(sentence)),
            GuardDetector::Remote { endpoint } => {
                let response = remote_client()
                    .post(endpoint)
                    .json(&RemoteRequest { text: sentence })
                    .send()
                    .map_err(|e| format!("remote classifier unreachable: {e}"))?;
                if !response.status().is_success() {
                    return Err(format!("remote classifier status {}", response.status()));
                }
                let parsed: RemoteResponse = response
                    .json()
                    .map_err(|e| format!("remote classifier bad body: {e}"))?;
                Ok(parsed.flagged)
            }
        }
    }
}
