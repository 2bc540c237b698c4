//! Runs one complete attack: render the attack prompt for a task, push the
//! (possibly defended) document through a countermeasure pipeline and the
//! attacker model, and judge the outcome.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::countermeasure::{
    apply_post, apply_pre, perturbed_copies, CountermeasureError, CountermeasureSpec, Detection,
    PipelineResult, PreContext, Span,
};
use crate::gateway::{Gateway, GatewayError, ModelSpec};
use crate::generator::{query_judge, JudgeRating, ReferenceMode};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("attack task {id}: {message}")]
    InvalidTask { id: String, message: String },
    #[error("attack prompt template must contain a {{data}} slot")]
    TemplateMissingDataSlot,
    #[error(transparent)]
    Countermeasure(#[from] CountermeasureError),
    /// Attacker (or judge) hard failure after the gateway's retries.
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// What the attacker is trying to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PiiGender,
    PiiBirthdate,
    PiiLocation,
    RagQuestion,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::PiiGender => "pii_gender",
            TaskKind::PiiBirthdate => "pii_birthdate",
            TaskKind::PiiLocation => "pii_location",
            TaskKind::RagQuestion => "rag_question",
        }
    }

    /// Attribute word substituted into PII prompt templates.
    pub fn attribute_word(&self) -> Option<&'static str> {
        match self {
            TaskKind::PiiGender => Some("gender"),
            TaskKind::PiiBirthdate => Some("birth date"),
            TaskKind::PiiLocation => Some("location"),
            TaskKind::RagQuestion => None,
        }
    }
}

/// One attack: an attribute to infer (or a RAG question), the prompt
/// template, and the ground truth when the judging protocol needs it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTask {
    pub id: String,
    pub kind: TaskKind,
    /// Template with a `{data}` slot; `{attribute}` and `{question}` are
    /// substituted first. Text before the slot becomes the system prompt,
    /// the data (plus any text after the slot) becomes the user content.
    pub prompt_template: String,
    pub ground_truth: Option<String>,
    pub question: Option<String>,
}

impl AttackTask {
    pub fn validate(&self, reference_mode: ReferenceMode) -> Result<(), HarnessError> {
        let fail = |message: &str| {
            Err(HarnessError::InvalidTask {
                id: self.id.clone(),
                message: message.to_string(),
            })
        };
        if !self.prompt_template.contains("{data}") {
            return Err(HarnessError::TemplateMissingDataSlot);
        }
        match self.kind {
            TaskKind::RagQuestion => {
                if self.question.is_none() {
                    return fail("rag task requires a question");
                }
                if self.ground_truth.is_none() {
                    return fail("rag task requires a reference answer");
                }
            }
            _ => {
                if reference_mode == ReferenceMode::GroundTruth && self.ground_truth.is_none() {
                    return fail("pii task requires ground truth under the ground_truth protocol");
                }
            }
        }
        Ok(())
    }

    /// Render (system prompt, user content) for the given document data.
    pub fn render(&self, data: &str) -> Result<(String, String), HarnessError> {
        let mut template = self.prompt_template.clone();
        if let Some(attribute) = self.kind.attribute_word() {
            template = template.replace("{attribute}", attribute);
        }
        if let Some(question) = &self.question {
            template = template.replace("{question}", question);
        }
        let Some(slot) = template.find("{data}") else {
            return Err(HarnessError::TemplateMissingDataSlot);
        };
        let system = template[..slot].trim_end().to_string();
        let after = &template[slot + "{data}".len()..];
        let user = format!("{data}{after}");
        Ok((system, user.trim_end().to_string()))
    }
}

/// One attack outcome: self-contained evidence sufficient to replay the
/// judgment (prompt, transformed data, answer, reference, threshold).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    #[serde(rename = "v")]
    pub version: u32,
    pub task_id: String,
    pub task: TaskKind,
    pub document_id: String,
    pub countermeasure: String,
    pub attacker: String,
    pub judge: String,
    pub raw_prompt: String,
    pub transformed_data: String,
    pub raw_answer: String,
    pub reference: String,
    pub raw_judge_text: String,
    pub judge_rating: Option<u8>,
    pub threshold: u8,
    /// `Some(rating >= threshold)`; `None` when `error` is set.
    pub attack_failed: Option<bool>,
    pub degraded_countermeasure: bool,
    pub detection: Detection,
    pub removed_spans: Vec<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
    /// Ratio of original-text length to defense length, when the document
    /// carried a defense.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AttackOutcome {
    /// Stable key identifying the (document, task, attacker,
    /// countermeasure) cell of a run matrix, used for resumption.
    pub fn tuple_key(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.document_id, self.task_id, self.attacker, self.countermeasure
        )
    }
}

/// Everything `run_attack` measured before judging.
#[derive(Debug, Clone)]
pub struct RawAttack {
    pub raw_prompt: String,
    pub pipeline: PipelineResult,
    pub degraded: bool,
    pub secret: Option<String>,
}

/// Execute `post(attack(pre(document)))` exactly.
///
/// For smoothllm this runs the attacker once per perturbed copy and takes
/// the majority vote; every other countermeasure makes a single attacker
/// call. Attacker hard failures (after the gateway's internal retries)
/// surface as errors for the caller to record.
pub fn run_attack(
    gateway: &Gateway,
    ctx: &PreContext,
    attacker: &ModelSpec,
    countermeasure: &CountermeasureSpec,
    task: &AttackTask,
    document: &str,
) -> Result<RawAttack, HarnessError> {
    countermeasure.validate()?;
    let (prompt, data) = task.render(document)?;
    let pre = apply_pre(countermeasure, ctx, &prompt, &data);

    let responses: Vec<String> = match countermeasure {
        CountermeasureSpec::SmoothLlm { copies, rate, seed } => {
            let copies_text = perturbed_copies(&pre.data, *copies, *rate, *seed)?;
            let mut responses = Vec::with_capacity(copies_text.len());
            for copy in &copies_text {
                responses.push(gateway.complete(attacker, &pre.prompt, copy)?.response_text);
            }
            responses
        }
        _ => vec![
            gateway
                .complete(attacker, &pre.prompt, &pre.data)?
                .response_text,
        ],
    };

    let final_answer = apply_post(countermeasure, &responses, pre.secret.as_deref())?;
    let ensemble =
        matches!(countermeasure, CountermeasureSpec::SmoothLlm { .. }).then_some(responses.clone());

    // A proactive refusal means the missing echo was taken as evidence of
    // an injection: record that as a detection.
    let detection = match countermeasure {
        CountermeasureSpec::Proactive { refusal, .. } if final_answer == *refusal => {
            Detection::Flagged
        }
        CountermeasureSpec::Proactive { .. } => Detection::Clean,
        _ => pre.detection,
    };

    Ok(RawAttack {
        raw_prompt: pre.prompt.clone(),
        pipeline: PipelineResult {
            transformed_data: pre.data,
            detection,
            removed_spans: pre.removed_spans,
            ensemble_responses: ensemble,
            final_answer,
        },
        degraded: pre.degraded,
        secret: pre.secret,
    })
}

#[derive(Debug, Clone)]
pub struct JudgedOutcome {
    pub rating: JudgeRating,
    pub attack_failed: bool,
    pub raw_judge_text: String,
}

/// Judge an answer against the reference; the attack failed iff the
/// dissimilarity rating reaches the threshold. Persistent malformed judge
/// output scores 1 (attack counted as successful — pessimistic for the
/// defender).
pub fn judge_outcome(
    gateway: &Gateway,
    judge: &ModelSpec,
    judge_system: &str,
    reference: &str,
    answer: &str,
    threshold: u8,
) -> Result<JudgedOutcome, GatewayError> {
    let (rating, raw_judge_text) = query_judge(gateway, judge, judge_system, reference, answer)?;
    Ok(JudgedOutcome {
        attack_failed: rating.value >= threshold,
        rating,
        raw_judge_text,
    })
}
