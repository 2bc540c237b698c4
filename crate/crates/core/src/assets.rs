//! Prompt assets.
//!
//! Prompts are shipped as plain-text files under a versioned assets
//! directory and embedded into the binary as defaults. A deployment can
//! override any of them by pointing a config at a directory containing
//! files with the same names.

use std::fs;
use std::io;
use std::path::Path;

/// File names looked up inside an override directory.
const FILES: [&str; 6] = [
    "defense_generator_system.txt",
    "judge_system.txt",
    "attack_pii.txt",
    "attack_rag.txt",
    "paraphrase_system.txt",
    "llm_detector_system.txt",
];

/// The prompt set used by the generation loop, harness and countermeasures.
#[derive(Debug, Clone)]
pub struct Assets {
    /// System prompt for the defense generator model.
    pub generator_system: String,
    /// System prompt for the judge model.
    pub judge_system: String,
    /// Attack prompt template for PII tasks ({attribute}, {data} slots).
    pub attack_pii: String,
    /// Attack prompt template for RAG tasks ({question}, {data} slots).
    pub attack_rag: String,
    /// System prompt for the paraphrasing helper.
    pub paraphrase_system: String,
    /// System prompt for the sentence-level injection detector helper.
    pub llm_detector_system: String,
}

impl Assets {
    /// The embedded v1 asset set.
    pub fn embedded() -> Self {
        Assets {
            generator_system: include_str!("../assets/v1/defense_generator_system.txt").to_string(),
            judge_system: include_str!("../assets/v1/judge_system.txt").to_string(),
            attack_pii: include_str!("../assets/v1/attack_pii.txt").to_string(),
            attack_rag: include_str!("../assets/v1/attack_rag.txt").to_string(),
            paraphrase_system: include_str!("../assets/v1/paraphrase_system.txt").to_string(),
            llm_detector_system: include_str!("../assets/v1/llm_detector_system.txt").to_string(),
        }
    }

    /// Load from a directory, falling back to the embedded text for any
    /// file that is absent. Present-but-unreadable files are an error.
    pub fn from_dir(dir: &Path) -> io::Result<Self> {
        let mut assets = Assets::embedded();
        for name in FILES {
            let path = dir.join(name);
            if path.exists() {
                let text = fs::read_to_string(&path)?;
                match name {
                    "defense_generator_system.txt" => assets.generator_system = text,
                    "judge_system.txt" => assets.judge_system = text,
                    "attack_pii.txt" => assets.attack_pii = text,
                    "attack_rag.txt" => assets.attack_rag = text,
                    "paraphrase_system.txt" => assets.paraphrase_system = text,
                    "llm_detector_system.txt" => assets.llm_detector_system = text,
                    _ => unreachable!(),
                }
            }
        }
        Ok(assets)
    }
}
