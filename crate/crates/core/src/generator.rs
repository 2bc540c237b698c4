//! Automatic defense generation: repeatedly sample a candidate injection
//! from a generator model, insert it into the target text, attack the
//! defended text with a stand-in attacker, and score the derailment with a
//! judge model. The loop stops at the first rating at or above the
//! acceptance threshold.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::Assets;
use crate::defense::{
    insert, normalize_defense_text, Defense, DefenseError, InsertionPolicy, StrategyTag,
};
use crate::gateway::{Gateway, GatewayError, ModelSpec};
use crate::harness::AttackTask;
use crate::util::stable_seed;
use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("no in-range rating marker in judge output: {0:?}")]
    MalformedJudgment(String),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error("model failure at iteration {iteration}: {source}")]
    ModelFailure {
        iteration: usize,
        source: GatewayError,
        /// Transcript up to the failure point; persist it and pass it back
        /// as `resume` to continue.
        partial: Box<GenerationTranscript>,
    },
}

/// What the judge's "correct answer" slot is filled with.
///
/// Ground truth when the corpus carries labeled attribute values; the
/// attacker's inference on the unprotected text otherwise. Always an
/// explicit choice, never inferred from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    GroundTruth,
    Baseline,
}

/// A parsed 1-10 judge rating. Higher means the attack output was judged
/// more wrong / unrelated; 10 means the attack completely failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRating {
    pub value: u8,
    pub parsed_from: String,
}

/// Extract the integer inside the last `[[n]]` marker.
///
/// Values outside 1-10 (the scale the judge prompt specifies) are
/// malformed; callers re-query up to three times and then pessimistically
/// score the iteration 1.
pub fn parse_rating(judge_output: &str) -> Result<JudgeRating, GenerationError> {
    static MARKER: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    let marker =
        MARKER.get_or_init(|| regex::Regex::new(r"\[\[\s*(\d{1,3})\s*\]\]").expect("marker regex"));
    let last = marker
        .captures_iter(judge_output)
        .last()
        .ok_or_else(|| GenerationError::MalformedJudgment(judge_output.to_string()))?;
    let value: u32 = last[1]
        .parse()
        .map_err(|_| GenerationError::MalformedJudgment(judge_output.to_string()))?;
    if !(1..=10).contains(&value) {
        return Err(GenerationError::MalformedJudgment(judge_output.to_string()));
    }
    Ok(JudgeRating {
        value: value as u8,
        parsed_from: judge_output.to_string(),
    })
}

/// The user message handed to the judge alongside its system prompt.
pub fn render_judge_input(reference: &str, answer: &str) -> String {
    format!("AI assistant's answer:\n{answer}\n\nCorrect answer:\n{reference}")
}

/// Query the judge, re-querying up to three times on malformed output
/// (each re-query bumps the sampling seed so cached responses don't
/// short-circuit the retry). Persistent malformed output scores a
/// pessimistic 1: a defense is never accepted on unparseable evidence.
pub fn query_judge(
    gateway: &Gateway,
    judge: &ModelSpec,
    judge_system: &str,
    reference: &str,
    answer: &str,
) -> Result<(JudgeRating, String), GatewayError> {
    let user = render_judge_input(reference, answer);
    let base_seed = judge.seed.unwrap_or(0);
    let mut last_raw = String::new();
    for attempt in 0..4u64 {
        let spec = if attempt == 0 {
            judge.clone()
        } else {
            judge.with_seed(base_seed + attempt)
        };
        let exchange = gateway.complete(&spec, judge_system, &user)?;
        last_raw = exchange.response_text;
        match parse_rating(&last_raw) {
            Ok(rating) => return Ok((rating, last_raw)),
            Err(_) => continue,
        }
    }
    log::warn!("judge output stayed malformed after 3 re-queries; scoring 1");
    Ok((
        JudgeRating {
            value: 1,
            parsed_from: last_raw.clone(),
        },
        last_raw,
    ))
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub generator: ModelSpec,
    pub attacker: ModelSpec,
    pub judge: ModelSpec,
    /// Attacker-query budget: at most `max_iterations + 1` attacker calls
    /// (one is the baseline inference).
    pub max_iterations: u32,
    /// Accept the first candidate rated at or above this (>= semantics).
    pub acceptance_threshold: u8,
    pub insertion_policy: InsertionPolicy,
    /// Redraw the insertion position each iteration (seed derived per
    /// iteration) instead of fixing it per text.
    pub reseed_insertion: bool,
    pub generator_prompt: String,
    pub judge_prompt: String,
    pub reference_mode: ReferenceMode,
}

impl GenerationConfig {
    /// Defaults: 20 iterations, threshold 7, boundary insertion.
    ///
    /// Sampling temperatures are the caller's choice on the specs; the
    /// loop only needs variance in the generator (1.0 is a sensible
    /// generator default, 0.0 for attacker and judge keeps scoring
    /// reproducible).
    pub fn new(
        generator: ModelSpec,
        attacker: ModelSpec,
        judge: ModelSpec,
        assets: &Assets,
    ) -> Self {
        GenerationConfig {
            generator,
            attacker,
            judge,
            max_iterations: 20,
            acceptance_threshold: 7,
            insertion_policy: InsertionPolicy::boundary(0),
            reseed_insertion: true,
            generator_prompt: assets.generator_system.clone(),
            judge_prompt: assets.judge_system.clone(),
            reference_mode: ReferenceMode::GroundTruth,
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.max_iterations == 0 {
            return Err(GenerationError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(1..=10).contains(&self.acceptance_threshold) {
            return Err(GenerationError::InvalidConfig(format!(
                "acceptance threshold {} outside [1, 10]",
                self.acceptance_threshold
            )));
        }
        if self.generator_prompt.is_empty() || self.judge_prompt.is_empty() {
            return Err(GenerationError::InvalidConfig(
                "prompt assets must be non-empty".into(),
            ));
        }
        for spec in [&self.generator, &self.attacker, &self.judge] {
            spec.validate()
                .map_err(|e| GenerationError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

/// One loop iteration, recorded verbatim for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub candidate: Defense,
    pub insertion_offset: usize,
    pub insertion_seed: u64,
    /// Attacker output on the defended text.
    pub defended_output: String,
    pub rating: u8,
    pub raw_judge_text: String,
}

/// Full record of one generation run; every generator/attacker/judge
/// exchange appears here verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTranscript {
    #[serde(rename = "v")]
    pub version: u32,
    pub id: String,
    pub target_text_id: String,
    pub attack_task_id: String,
    /// Attacker output on the undefended text; `None` only in partial
    /// transcripts persisted before the baseline completed.
    pub baseline_output: Option<String>,
    pub iterations: Vec<IterationRecord>,
    /// Index of the accepted iteration (rating >= threshold), if any.
    pub accepted: Option<usize>,
    pub attacker_query_count: u32,
    pub completed: bool,
}

impl GenerationTranscript {
    fn empty(id: String, target_text_id: &str, attack_task_id: &str) -> Self {
        GenerationTranscript {
            version: SCHEMA_VERSION,
            id,
            target_text_id: target_text_id.to_string(),
            attack_task_id: attack_task_id.to_string(),
            baseline_output: None,
            iterations: Vec::new(),
            accepted: None,
            attacker_query_count: 0,
            completed: false,
        }
    }

    /// Check the structural invariants a finished transcript must satisfy.
    pub fn validate(&self, threshold: u8) -> Result<(), GenerationError> {
        if self.completed {
            if self.baseline_output.is_none() {
                return Err(GenerationError::InvalidConfig(
                    "completed transcript lacks a baseline output".into(),
                ));
            }
            if self.attacker_query_count != self.iterations.len() as u32 + 1 {
                return Err(GenerationError::InvalidConfig(format!(
                    "attacker query count {} != iterations {} + 1",
                    self.attacker_query_count,
                    self.iterations.len()
                )));
            }
        }
        if let Some(idx) = self.accepted {
            let Some(record) = self.iterations.get(idx) else {
                return Err(GenerationError::InvalidConfig(format!(
                    "accepted index {idx} out of range"
                )));
            };
            if record.rating < threshold {
                return Err(GenerationError::InvalidConfig(format!(
                    "accepted iteration rated {} below threshold {threshold}",
                    record.rating
                )));
            }
        }
        Ok(())
    }

    /// Index of the best candidate: highest rating, first occurrence on
    /// ties. `None` only for transcripts without iterations.
    pub fn best_iteration(&self) -> Option<usize> {
        let mut best: Option<(usize, u8)> = None;
        for (idx, record) in self.iterations.iter().enumerate() {
            if best.is_none_or(|(_, rating)| record.rating > rating) {
                best = Some((idx, record.rating));
            }
        }
        best.map(|(idx, _)| idx)
    }
}

/// Recompute the acceptance decision from a transcript alone: the first
/// iteration rated at or above the threshold.
pub fn replay_acceptance(transcript: &GenerationTranscript, threshold: u8) -> Option<usize> {
    transcript
        .iterations
        .iter()
        .position(|it| it.rating >= threshold)
}

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub defense: Defense,
    pub transcript: GenerationTranscript,
    /// False when the budget ran out and `defense` is the best-effort
    /// highest-rated candidate.
    pub accepted: bool,
}

/// Attacker inference on the undefended text (the baseline the judge
/// compares against, and the paper-visible "did the attack work at all"
/// measurement). The gateway caches this per (attacker, task, text).
pub fn baseline_inference(
    gateway: &Gateway,
    attacker: &ModelSpec,
    task: &AttackTask,
    text: &str,
) -> Result<String, GatewayError> {
    let (system, user) = task
        .render(text)
        .map_err(|e| GatewayError::InvalidModelSpec(format!("task render: {e}")))?;
    // A refusal is still an output: the judge scores it like any answer.
    Ok(gateway.complete(attacker, &system, &user)?.response_text)
}

fn generator_user_prompt(text: &str, iteration: usize, previous: Option<(&str, u8)>) -> String {
    let mut prompt = format!("Target text:\n{text}\n\nIteration {}.", iteration + 1);
    match previous {
        None => prompt.push_str(" Propose your adversarial injection prompt P."),
        Some((prev, rating)) => {
            prompt.push_str(&format!(
                " Your previous prompt P was:\n{prev}\nIt was rated {rating}/10 for derailing the attacker (10 = completely derailed). Propose a new, different, improved P."
            ));
        }
    }
    prompt
}

/// Heuristic strategy tags for a generated candidate. The generator prompt
/// instructs all four strategies, but candidates vary; tag what is
/// actually present, defaulting to decoy-task.
fn infer_strategy_tags(text: &str) -> BTreeSet<StrategyTag> {
    static LANG: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    static FAKE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    static DECOY: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    let lang = LANG.get_or_init(|| {
        regex::Regex::new(r"(?i)\b(respond|answer|reply|antworte)\b[^.\n]{0,40}\bin\s+\p{Lu}\p{L}+")
            .expect("lang regex")
    });
    let fake = FAKE.get_or_init(|| {
        regex::Regex::new(
            r"(?i)(cannot be answered|cannot be determined|has been (answered|addressed|resolved)|already answered|not sufficient information|could be several|unable to answer|item above is resolved)",
        )
        .expect("fake regex")
    });
    let decoy = DECOY.get_or_init(|| {
        regex::Regex::new(
            r"(?i)(\?|\b(count|identify|provide|summari[sz]e|list|analy[sz]e|tally|return|name|explain)\b)",
        )
        .expect("decoy regex")
    });

    let mut tags = BTreeSet::new();
    if lang.is_match(text) {
        tags.insert(StrategyTag::LanguageSwitch);
    }
    if fake.is_match(text) {
        tags.insert(StrategyTag::FakeAnswer);
    }
    if decoy.is_match(text) {
        tags.insert(StrategyTag::DecoyTask);
    }
    if text.starts_with('\n')
        || text.ends_with('\n')
        || text.contains("Answer:")
        || text.contains("Question:")
        || text.contains("Response")
    {
        tags.insert(StrategyTag::Formatting);
    }
    if tags.is_empty() {
        tags.insert(StrategyTag::DecoyTask);
    }
    tags
}

/// Deterministic transcript id for a (text, task, model-trio, seed)
/// combination; persisted transcripts are looked up by it on resumption.
pub fn transcript_id(text_id: &str, task_id: &str, config: &GenerationConfig) -> String {
    format!(
        "t{:016x}",
        stable_seed(&[
            text_id,
            task_id,
            &config.generator.name,
            &config.attacker.name,
            &config.judge.name,
            &config.insertion_policy.rng_seed.to_string(),
        ])
    )
}

/// Run the generation loop for one text and task.
///
/// Every iteration performs exactly one generator sample, one insertion,
/// one attacker call and one judge call; the loop halts at the first
/// rating at or above the threshold or when the iteration budget is
/// exhausted (returning the best-rated candidate flagged not-accepted).
/// With all three roles scripted and fixed seeds this is a pure function
/// of its inputs. Hard model failures carry the partial transcript for
/// resumption.
pub fn generate_defense(
    gateway: &Gateway,
    text: &str,
    text_id: &str,
    task: &AttackTask,
    config: &GenerationConfig,
    resume: Option<GenerationTranscript>,
) -> Result<GenerationOutcome, GenerationError> {
    config.validate()?;
    task.validate(config.reference_mode)
        .map_err(|e| GenerationError::InvalidConfig(e.to_string()))?;

    let id = transcript_id(text_id, &task.id, config);
    let mut transcript = match resume {
        Some(partial) => {
            if partial.target_text_id != text_id || partial.attack_task_id != task.id {
                return Err(GenerationError::InvalidConfig(format!(
                    "resume transcript {} belongs to ({}, {}), not ({}, {})",
                    partial.id, partial.target_text_id, partial.attack_task_id, text_id, task.id
                )));
            }
            partial
        }
        None => GenerationTranscript::empty(id, text_id, &task.id),
    };

    if transcript.baseline_output.is_none() {
        match baseline_inference(gateway, &config.attacker, task, text) {
            Ok(baseline) => {
                transcript.baseline_output = Some(baseline);
                transcript.attacker_query_count = transcript.iterations.len() as u32 + 1;
            }
            Err(source) => {
                return Err(GenerationError::ModelFailure {
                    iteration: 0,
                    source,
                    partial: Box::new(transcript),
                })
            }
        }
    }

    let reference = match config.reference_mode {
        ReferenceMode::GroundTruth => task.ground_truth.clone().ok_or_else(|| {
            GenerationError::InvalidConfig(format!(
                "task {} has no ground truth but reference mode is ground_truth",
                task.id
            ))
        })?,
        ReferenceMode::Baseline => transcript
            .baseline_output
            .clone()
            .expect("baseline computed above"),
    };

    if transcript.accepted.is_none() && !transcript.completed {
        let start = transcript.iterations.len();
        for iteration in start..config.max_iterations as usize {
            let previous = transcript
                .iterations
                .last()
                .map(|it| (it.candidate.text.as_str(), it.rating));
            let user = generator_user_prompt(text, iteration, previous);

            let fail = |source: GatewayError, transcript: GenerationTranscript| {
                GenerationError::ModelFailure {
                    iteration,
                    source,
                    partial: Box::new(transcript),
                }
            };

            let candidate_exchange =
                match gateway.complete(&config.generator, &config.generator_prompt, &user) {
                    Ok(exchange) => exchange,
                    Err(e) => return Err(fail(e, transcript)),
                };
            let candidate_text = normalize_defense_text(&candidate_exchange.response_text);
            let defense = Defense::new(
                candidate_text.clone(),
                infer_strategy_tags(&candidate_text),
                config.generator.name.clone(),
                Some(gateway.timestamp()),
                transcript.id.clone(),
            )?;

            let insertion_seed = if config.reseed_insertion {
                stable_seed(&[
                    &config.insertion_policy.rng_seed.to_string(),
                    text_id,
                    &iteration.to_string(),
                ])
            } else {
                config.insertion_policy.rng_seed
            };
            let document = insert(
                text,
                &defense,
                &config.insertion_policy.with_seed(insertion_seed),
            )?;

            let (attack_system, attack_user) = task
                .render(&document.defended)
                .map_err(|e| GenerationError::InvalidConfig(e.to_string()))?;
            let attack_exchange =
                match gateway.complete(&config.attacker, &attack_system, &attack_user) {
                    Ok(exchange) => exchange,
                    Err(e) => return Err(fail(e, transcript)),
                };

            let (rating, raw_judge_text) = match query_judge(
                gateway,
                &config.judge,
                &config.judge_prompt,
                &reference,
                &attack_exchange.response_text,
            ) {
                Ok(result) => result,
                Err(e) => return Err(fail(e, transcript)),
            };

            transcript.iterations.push(IterationRecord {
                candidate: defense,
                insertion_offset: document.insertion_offset,
                insertion_seed,
                defended_output: attack_exchange.response_text,
                rating: rating.value,
                raw_judge_text,
            });
            transcript.attacker_query_count = transcript.iterations.len() as u32 + 1;

            if rating.value >= config.acceptance_threshold {
                transcript.accepted = Some(iteration);
                break;
            }
        }
    }
    transcript.completed = true;

    let (defense, accepted) = match transcript.accepted {
        Some(idx) => (transcript.iterations[idx].candidate.clone(), true),
        None => {
            let best = transcript.best_iteration().ok_or_else(|| {
                GenerationError::InvalidConfig("no iterations were performed".into())
            })?;
            log::warn!(
                "budget exhausted for {}: returning best-effort candidate rated {}",
                transcript.id,
                transcript.iterations[best].rating
            );
            (transcript.iterations[best].candidate.clone(), false)
        }
    };
    Ok(GenerationOutcome {
        defense,
        transcript,
        accepted,
    })
}
