//! Experiment matrices: dataset × attackers × countermeasures × tasks,
//! with deterministic ordering, resumable append-only results, and
//! aggregation into summary statistics.

pub mod corpus;
pub mod pool;
pub mod report;
pub mod stats;

pub use corpus::{load_corpus, CorpusKind, DatasetRecord, RecordAttributes, RAG_DOCUMENT_COUNT};
pub use pool::{DefensePool, PoolEntry};
pub use report::{emit_intrusiveness, emit_summary, format_summary_table};
pub use stats::{
    intrusiveness_analysis, summarize, wilson_interval, RatioBin, SummaryStats,
    DEFAULT_RATIO_BIN_EDGES, Z_95,
};

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::Assets;
use crate::countermeasure::{
    calibrate_threshold, CharTrigramScorer, CountermeasureSpec, Detection, PreContext,
};
use crate::defense::{insert, Defense, InsertionPolicy};
use crate::gateway::{Gateway, GatewayError, ModelSpec};
use crate::generator::{
    baseline_inference, generate_defense, GenerationConfig, GenerationError, GenerationTranscript,
    ReferenceMode,
};
use crate::harness::{judge_outcome, run_attack, AttackOutcome, AttackTask, TaskKind};
use crate::util::{append_jsonl, read_jsonl, stable_seed};
use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path:?} line {line}: {message}")]
    Corpus {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("defense pool: {0}")]
    Pool(String),
    #[error("defense pool and target corpus overlap on text id {0:?}")]
    PoolOverlap(String),
    #[error("invalid run matrix: {0}")]
    InvalidMatrix(String),
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Where the defenses evaluated by a matrix come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseSource {
    /// Run the generation loop once per (record, task) and reuse the
    /// defense across every countermeasure and attacker.
    GenerateFresh,
    /// Defend each record with a pool entry chosen uniformly at random
    /// (seeded). The pool's source texts must be disjoint from the
    /// matrix's records.
    Pool,
    /// Attack the undefended text (baseline rows).
    None,
}

/// A fully resolved experiment: everything `run_matrix` needs.
#[derive(Debug, Clone)]
pub struct RunMatrix {
    pub name: String,
    pub corpus_kind: CorpusKind,
    pub records: Vec<DatasetRecord>,
    pub attackers: Vec<ModelSpec>,
    pub countermeasures: Vec<CountermeasureSpec>,
    pub tasks: Vec<TaskKind>,
    pub defense_source: DefenseSource,
    pub pool: Option<DefensePool>,
    pub seed: u64,
    /// Required for `GenerateFresh`.
    pub generation: Option<GenerationConfig>,
    /// Insertion policy for pool-sourced defenses.
    pub insertion_policy: InsertionPolicy,
    pub failure_threshold: u8,
    pub reference_mode: ReferenceMode,
    /// Judge used for evaluation outcomes (independent of the generation
    /// loop's judge, though configs typically share one).
    pub judge: ModelSpec,
    pub assets: Assets,
}

impl RunMatrix {
    pub fn validate(&self) -> Result<(), EvalError> {
        let fail = |m: String| Err(EvalError::InvalidMatrix(m));
        if self.records.is_empty() {
            return fail("no records".into());
        }
        if self.attackers.is_empty() {
            return fail("no attackers".into());
        }
        if self.countermeasures.is_empty() {
            return fail("no countermeasures".into());
        }
        if self.tasks.is_empty() {
            return fail("no tasks".into());
        }
        if !(1..=10).contains(&self.failure_threshold) {
            return fail(format!(
                "failure threshold {} outside [1, 10]",
                self.failure_threshold
            ));
        }
        for task in &self.tasks {
            if !self.corpus_kind.supports(*task) {
                return fail(format!(
                    "task {} is not valid for corpus kind {}",
                    task.as_str(),
                    self.corpus_kind.as_str()
                ));
            }
        }
        for attacker in &self.attackers {
            attacker
                .validate()
                .map_err(|e| EvalError::InvalidMatrix(e.to_string()))?;
        }
        self.judge
            .validate()
            .map_err(|e| EvalError::InvalidMatrix(e.to_string()))?;
        for cm in &self.countermeasures {
            cm.validate()
                .map_err(|e| EvalError::InvalidMatrix(e.to_string()))?;
        }
        match self.defense_source {
            DefenseSource::GenerateFresh => {
                let Some(generation) = &self.generation else {
                    return fail("generate_fresh requires a generation config".into());
                };
                generation.validate()?;
            }
            DefenseSource::Pool => {
                let Some(pool) = &self.pool else {
                    return fail("pool source requires a defense pool".into());
                };
                if pool.is_empty() {
                    return fail("defense pool is empty".into());
                }
                let sources = pool.source_ids();
                for record in &self.records {
                    if sources.contains(record.id.as_str()) {
                        return Err(EvalError::PoolOverlap(record.id.clone()));
                    }
                }
            }
            DefenseSource::None => {}
        }
        Ok(())
    }
}

/// Output locations for one matrix run.
pub struct RunOutput {
    pub outcomes_path: PathBuf,
    /// Line-delimited transcript records (one JSON object per line).
    pub transcripts_path: PathBuf,
    /// Keep existing outcomes and continue after them instead of starting
    /// over.
    pub resume: bool,
}

/// The data string attacked when no defense is applied, and the base for
/// baseline-reference inference. RAG records join their five documents
/// with source separators.
pub fn raw_data(record: &DatasetRecord) -> String {
    match record.corpus {
        CorpusKind::Rag => join_documents(
            record
                .documents
                .as_deref()
                .unwrap_or_default()
                .iter()
                .map(String::as_str),
        ),
        _ => record.text.clone().unwrap_or_default(),
    }
}

fn join_documents<'a>(docs: impl Iterator<Item = &'a str>) -> String {
    docs.enumerate()
        .map(|(i, d)| format!("--- Source {} ---\n{}", i + 1, d))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Build the attack task for one record and task kind.
pub fn build_task(record: &DatasetRecord, kind: TaskKind, assets: &Assets) -> AttackTask {
    let template = match kind {
        TaskKind::RagQuestion => assets.attack_rag.clone(),
        _ => assets.attack_pii.clone(),
    };
    AttackTask {
        id: format!("{}:{}", record.id, kind.as_str()),
        kind,
        prompt_template: template,
        ground_truth: record.ground_truth_for(kind),
        question: record.question.clone(),
    }
}

/// Prepared (defended or raw) data for one (record, task) pair.
#[derive(Debug, Clone)]
struct Prepared {
    data: String,
    length_ratio: Option<f64>,
    /// Generation failed; every dependent outcome records this error.
    error: Option<String>,
}

/// Append-only store of generation transcripts: one JSON record per line.
/// Later lines for the same id supersede earlier ones, so a resumed run
/// appends a partial transcript's continuation without rewriting history.
pub struct TranscriptStore {
    path: PathBuf,
    map: HashMap<String, GenerationTranscript>,
}

impl TranscriptStore {
    /// Open the store; without `resume` any existing file is truncated.
    pub fn open(path: &Path, resume: bool) -> Result<Self, EvalError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| EvalError::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        let mut map = HashMap::new();
        if path.exists() {
            if resume {
                let mut failure: Option<EvalError> = None;
                read_jsonl::<GenerationTranscript, _>(path, |line, parsed| {
                    if failure.is_some() {
                        return Ok(());
                    }
                    match parsed {
                        Ok(transcript) => {
                            map.insert(transcript.id.clone(), transcript);
                        }
                        Err(e) => {
                            failure = Some(EvalError::Corpus {
                                path: path.to_path_buf(),
                                line,
                                message: format!("corrupt transcript record: {e}"),
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
            } else {
                std::fs::write(path, b"").map_err(|e| EvalError::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
            }
        }
        Ok(TranscriptStore {
            path: path.to_path_buf(),
            map,
        })
    }

    pub fn get(&self, id: &str) -> Option<&GenerationTranscript> {
        self.map.get(id)
    }

    pub fn append(&mut self, transcript: &GenerationTranscript) -> Result<(), EvalError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| EvalError::Io {
                path: self.path.clone(),
                source: e,
            })?;
        let mut writer = BufWriter::new(file);
        append_jsonl(&mut writer, transcript).map_err(|e| EvalError::Io {
            path: self.path.clone(),
            source: e,
        })?;
        self.map.insert(transcript.id.clone(), transcript.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Generate (or reload from the store) the defense for one text. Soft
/// model failures come back as `Ok(Err(message))` so the run can
/// continue; config errors are hard.
fn generate_with_persistence(
    gateway: &Gateway,
    text: &str,
    text_id: &str,
    task: &AttackTask,
    config: &GenerationConfig,
    store: &mut TranscriptStore,
) -> Result<Result<(Defense, usize), String>, EvalError> {
    let id = crate::generator::transcript_id(text_id, &task.id, config);
    let resume = match store.get(&id) {
        Some(transcript) if transcript.completed => {
            let idx = transcript
                .accepted
                .or_else(|| transcript.best_iteration())
                .ok_or_else(|| {
                    EvalError::InvalidMatrix(format!("completed transcript {id} has no iterations"))
                })?;
            let record = &transcript.iterations[idx];
            return Ok(Ok((record.candidate.clone(), record.insertion_offset)));
        }
        Some(partial) => Some(partial.clone()),
        None => None,
    };

    match generate_defense(gateway, text, text_id, task, config, resume) {
        Ok(outcome) => {
            store.append(&outcome.transcript)?;
            let idx = outcome
                .transcript
                .accepted
                .or_else(|| outcome.transcript.best_iteration())
                .expect("successful generation has iterations");
            let offset = outcome.transcript.iterations[idx].insertion_offset;
            Ok(Ok((outcome.defense, offset)))
        }
        Err(GenerationError::ModelFailure {
            iteration,
            source,
            partial,
        }) => {
            store.append(&partial)?;
            log::warn!(
                "generation for {text_id} failed at iteration {iteration}: {source}; partial transcript persisted"
            );
            Ok(Err(format!("defense generation failed: {source}")))
        }
        Err(hard) => Err(hard.into()),
    }
}

/// Prepare the defended data for every (record, task) pair up front; a
/// (record, task) pair generates its defense once and reuses it across
/// all countermeasures and attackers.
fn prepare_defenses(
    gateway: &Gateway,
    matrix: &RunMatrix,
    output: &RunOutput,
) -> Result<HashMap<(String, TaskKind), Prepared>, EvalError> {
    let mut prepared = HashMap::new();
    if matrix.defense_source == DefenseSource::None {
        return Ok(prepared);
    }
    let mut store = TranscriptStore::open(&output.transcripts_path, output.resume)?;
    for record in &matrix.records {
        for &kind in &matrix.tasks {
            let entry = match matrix.defense_source {
                DefenseSource::GenerateFresh => {
                    prepare_generated(gateway, matrix, record, kind, &mut store)?
                }
                DefenseSource::Pool => prepare_pooled(matrix, record, kind)?,
                DefenseSource::None => unreachable!(),
            };
            prepared.insert((record.id.clone(), kind), entry);
        }
    }
    Ok(prepared)
}

fn prepare_generated(
    gateway: &Gateway,
    matrix: &RunMatrix,
    record: &DatasetRecord,
    kind: TaskKind,
    store: &mut TranscriptStore,
) -> Result<Prepared, EvalError> {
    let config = matrix.generation.as_ref().expect("validated");
    let task = build_task(record, kind, &matrix.assets);
    match record.corpus {
        CorpusKind::Rag => {
            // Defenses are applied to each source article individually.
            let docs = record.documents.as_deref().unwrap_or_default();
            let mut defended_docs = Vec::with_capacity(docs.len());
            for (i, doc) in docs.iter().enumerate() {
                let text_id = format!("{}:d{}", record.id, i + 1);
                match generate_with_persistence(gateway, doc, &text_id, &task, config, store)? {
                    Ok((defense, offset)) => {
                        let defended = insert(doc, &defense, &InsertionPolicy::fixed(offset))
                            .map_err(|e| EvalError::InvalidMatrix(e.to_string()))?;
                        defended_docs.push(defended.defended);
                    }
                    Err(message) => {
                        return Ok(Prepared {
                            data: String::new(),
                            length_ratio: None,
                            error: Some(message),
                        })
                    }
                }
            }
            Ok(Prepared {
                data: join_documents(defended_docs.iter().map(String::as_str)),
                length_ratio: None,
                error: None,
            })
        }
        _ => {
            let text = record.text.as_deref().expect("validated corpus record");
            match generate_with_persistence(gateway, text, &record.id, &task, config, store)? {
                Ok((defense, offset)) => {
                    let defended = insert(text, &defense, &InsertionPolicy::fixed(offset))
                        .map_err(|e| EvalError::InvalidMatrix(e.to_string()))?;
                    Ok(Prepared {
                        data: defended.defended.clone(),
                        length_ratio: Some(defended.length_ratio),
                        error: None,
                    })
                }
                Err(message) => Ok(Prepared {
                    data: String::new(),
                    length_ratio: None,
                    error: Some(message),
                }),
            }
        }
    }
}

fn prepare_pooled(
    matrix: &RunMatrix,
    record: &DatasetRecord,
    kind: TaskKind,
) -> Result<Prepared, EvalError> {
    let pool = matrix.pool.as_ref().expect("validated");
    let pick = |salt: &str| -> &Defense {
        let seed = stable_seed(&[&matrix.seed.to_string(), &record.id, kind.as_str(), salt]);
        let idx = ChaCha8Rng::seed_from_u64(seed).random_range(0..pool.len());
        &pool.entries[idx].defense
    };
    let insert_with = |text: &str, defense: &Defense, salt: &str| {
        let seed = stable_seed(&[
            "insert",
            &matrix.seed.to_string(),
            &record.id,
            kind.as_str(),
            salt,
        ]);
        insert(text, defense, &matrix.insertion_policy.with_seed(seed))
            .map_err(|e| EvalError::InvalidMatrix(e.to_string()))
    };
    match record.corpus {
        CorpusKind::Rag => {
            let docs = record.documents.as_deref().unwrap_or_default();
            let mut defended_docs = Vec::with_capacity(docs.len());
            for (i, doc) in docs.iter().enumerate() {
                let salt = format!("d{i}");
                let defended = insert_with(doc, pick(&salt), &salt)?;
                defended_docs.push(defended.defended);
            }
            Ok(Prepared {
                data: join_documents(defended_docs.iter().map(String::as_str)),
                length_ratio: None,
                error: None,
            })
        }
        _ => {
            let text = record.text.as_deref().expect("validated corpus record");
            let defended = insert_with(text, pick(""), "")?;
            Ok(Prepared {
                data: defended.defended.clone(),
                length_ratio: Some(defended.length_ratio),
                error: None,
            })
        }
    }
}

/// One cell instance of the matrix, in canonical order.
struct Tuple<'a> {
    record: &'a DatasetRecord,
    kind: TaskKind,
    attacker: &'a ModelSpec,
    countermeasure: &'a CountermeasureSpec,
}

impl Tuple<'_> {
    fn key(&self) -> String {
        format!(
            "{}|{}:{}|{}|{}",
            self.record.id,
            self.record.id,
            self.kind.as_str(),
            self.attacker.name,
            self.countermeasure.name()
        )
    }
}

struct MatrixContext<'a> {
    gateway: &'a Gateway,
    matrix: &'a RunMatrix,
    prepared: HashMap<(String, TaskKind), Prepared>,
    ppl_scorer: Option<CharTrigramScorer>,
    ppl_thresholds: HashMap<usize, f64>,
    /// (record, task, attacker) → baseline inference, memoized across
    /// tuples; identical values regardless of which worker fills it.
    baselines: Mutex<HashMap<String, Result<String, String>>>,
}

fn error_outcome(tuple: &Tuple, judge: &str, threshold: u8, message: String) -> AttackOutcome {
    AttackOutcome {
        version: SCHEMA_VERSION,
        task_id: format!("{}:{}", tuple.record.id, tuple.kind.as_str()),
        task: tuple.kind,
        document_id: tuple.record.id.clone(),
        countermeasure: tuple.countermeasure.name().to_string(),
        attacker: tuple.attacker.name.clone(),
        judge: judge.to_string(),
        raw_prompt: String::new(),
        transformed_data: String::new(),
        raw_answer: String::new(),
        reference: String::new(),
        raw_judge_text: String::new(),
        judge_rating: None,
        threshold,
        attack_failed: None,
        degraded_countermeasure: false,
        detection: Detection::NotApplicable,
        removed_spans: Vec::new(),
        ensemble_size: None,
        length_ratio: None,
        error: Some(message),
    }
}

fn evaluate_tuple(ctx: &MatrixContext, tuple: &Tuple) -> AttackOutcome {
    let matrix = ctx.matrix;
    let task = build_task(tuple.record, tuple.kind, &matrix.assets);
    let fail = |message: String| {
        error_outcome(tuple, &matrix.judge.name, matrix.failure_threshold, message)
    };

    // Data under attack for this tuple.
    let (data, length_ratio) = match matrix.defense_source {
        DefenseSource::None => (raw_data(tuple.record), None),
        _ => {
            let prepared = &ctx.prepared[&(tuple.record.id.clone(), tuple.kind)];
            if let Some(message) = &prepared.error {
                return fail(message.clone());
            }
            (prepared.data.clone(), prepared.length_ratio)
        }
    };

    // Judge reference, per the active protocol.
    let reference = match matrix.reference_mode {
        ReferenceMode::GroundTruth => match task.ground_truth.clone() {
            Some(truth) => truth,
            None => return fail("record lacks ground truth for ground_truth protocol".into()),
        },
        ReferenceMode::Baseline => {
            let key = format!(
                "{}|{}|{}",
                tuple.record.id,
                tuple.kind.as_str(),
                tuple.attacker.name
            );
            let cached = ctx
                .baselines
                .lock()
                .expect("baseline lock")
                .get(&key)
                .cloned();
            let result = match cached {
                Some(result) => result,
                None => {
                    let computed = baseline_inference(
                        ctx.gateway,
                        tuple.attacker,
                        &task,
                        &raw_data(tuple.record),
                    )
                    .map_err(|e| e.to_string());
                    ctx.baselines
                        .lock()
                        .expect("baseline lock")
                        .insert(key, computed.clone());
                    computed
                }
            };
            match result {
                Ok(baseline) => baseline,
                Err(message) => return fail(format!("baseline inference failed: {message}")),
            }
        }
    };

    let mut pre_ctx = PreContext::new(ctx.gateway, &matrix.assets);
    if let CountermeasureSpec::Ppl { window, .. } = tuple.countermeasure {
        pre_ctx.ppl_scorer = ctx
            .ppl_scorer
            .as_ref()
            .map(|s| s as &dyn crate::countermeasure::LikelihoodScorer);
        pre_ctx.calibrated_ppl_threshold = ctx.ppl_thresholds.get(window).copied();
    }

    let raw = match run_attack(
        ctx.gateway,
        &pre_ctx,
        tuple.attacker,
        tuple.countermeasure,
        &task,
        &data,
    ) {
        Ok(raw) => raw,
        Err(e) => return fail(e.to_string()),
    };

    let judged = match judge_outcome(
        ctx.gateway,
        &matrix.judge,
        &matrix.assets.judge_system,
        &reference,
        &raw.pipeline.final_answer,
        matrix.failure_threshold,
    ) {
        Ok(judged) => judged,
        Err(e) => return fail(format!("judge failed: {e}")),
    };

    AttackOutcome {
        version: SCHEMA_VERSION,
        task_id: task.id,
        task: tuple.kind,
        document_id: tuple.record.id.clone(),
        countermeasure: tuple.countermeasure.name().to_string(),
        attacker: tuple.attacker.name.clone(),
        judge: matrix.judge.name.clone(),
        raw_prompt: raw.raw_prompt,
        transformed_data: raw.pipeline.transformed_data,
        raw_answer: raw.pipeline.final_answer,
        reference,
        raw_judge_text: judged.raw_judge_text,
        judge_rating: Some(judged.rating.value),
        threshold: matrix.failure_threshold,
        attack_failed: Some(judged.attack_failed),
        degraded_countermeasure: raw.degraded,
        detection: raw.pipeline.detection,
        removed_spans: raw.pipeline.removed_spans,
        ensemble_size: raw.pipeline.ensemble_responses.as_ref().map(Vec::len),
        length_ratio,
        error: None,
    }
}

/// Load previously written outcomes (for resumption and for `report`).
pub fn load_outcomes(path: &Path) -> Result<Vec<AttackOutcome>, EvalError> {
    let mut outcomes = Vec::new();
    let mut failure: Option<EvalError> = None;
    read_jsonl::<AttackOutcome, _>(path, |line, parsed| {
        if failure.is_some() {
            return Ok(());
        }
        match parsed {
            Ok(outcome) => outcomes.push(outcome),
            Err(e) => {
                failure = Some(EvalError::Corpus {
                    path: path.to_path_buf(),
                    line,
                    message: format!("corrupt outcome record: {e}"),
                })
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
    Ok(outcomes)
}

/// Compute `compute(i)` for every position, delivering results to
/// `consume` strictly in position order. With more than one worker the
/// computations run on scoped threads; delivery order is unchanged.
fn compute_ordered<T: Send>(
    total: usize,
    workers: usize,
    compute: impl Fn(usize) -> T + Sync,
    mut consume: impl FnMut(usize, T) -> Result<(), EvalError>,
) -> Result<(), EvalError> {
    if workers <= 1 || total <= 1 {
        for i in 0..total {
            consume(i, compute(i))?;
        }
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    let cancelled = AtomicBool::new(false);
    let (sender, receiver) = std::sync::mpsc::channel::<(usize, T)>();
    let mut result: Result<(), EvalError> = Ok(());

    std::thread::scope(|scope| {
        for _ in 0..workers.min(total) {
            let sender = sender.clone();
            let next = &next;
            let cancelled = &cancelled;
            let compute = &compute;
            scope.spawn(move || loop {
                if cancelled.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= total {
                    break;
                }
                if sender.send((i, compute(i))).is_err() {
                    break;
                }
            });
        }
        drop(sender);

        let mut buffer: std::collections::BTreeMap<usize, T> = std::collections::BTreeMap::new();
        let mut expected = 0usize;
        while let Ok((i, value)) = receiver.recv() {
            buffer.insert(i, value);
            while let Some(value) = buffer.remove(&expected) {
                if result.is_ok() {
                    if let Err(e) = consume(expected, value) {
                        result = Err(e);
                        cancelled.store(true, Ordering::Relaxed);
                    }
                }
                expected += 1;
            }
        }
    });
    result
}

/// Execute a run matrix.
///
/// Outcome tuples run in canonical order (records × tasks × attackers ×
/// countermeasures); results are appended to the outcomes file in that
/// order, so an interrupted run leaves a clean prefix and `resume: true`
/// completes it to a byte-identical final file. Per-outcome failures are
/// recorded in the outcome's error column and the run continues.
pub fn run_matrix(
    gateway: &Gateway,
    matrix: &RunMatrix,
    output: &RunOutput,
    max_concurrency: usize,
) -> Result<Vec<AttackOutcome>, EvalError> {
    matrix.validate()?;
    if let Some(parent) = output.outcomes_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| EvalError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }

    let mut existing: HashMap<String, AttackOutcome> = HashMap::new();
    if output.outcomes_path.exists() {
        if output.resume {
            for outcome in load_outcomes(&output.outcomes_path)? {
                existing.insert(outcome.tuple_key(), outcome);
            }
        } else {
            std::fs::write(&output.outcomes_path, b"").map_err(|e| EvalError::Io {
                path: output.outcomes_path.clone(),
                source: e,
            })?;
        }
    }

    // Fit and calibrate the perplexity scorer on the undefended corpus.
    let ppl_windows: Vec<usize> = matrix
        .countermeasures
        .iter()
        .filter_map(|cm| match cm {
            CountermeasureSpec::Ppl {
                window,
                threshold: None,
            } => Some(*window),
            _ => None,
        })
        .collect();
    let needs_scorer = matrix
        .countermeasures
        .iter()
        .any(|cm| matches!(cm, CountermeasureSpec::Ppl { .. }));
    let ppl_scorer =
        needs_scorer.then(|| CharTrigramScorer::fit(matrix.records.iter().flat_map(|r| r.texts())));
    let mut ppl_thresholds = HashMap::new();
    if let Some(scorer) = &ppl_scorer {
        for window in ppl_windows {
            if let std::collections::hash_map::Entry::Vacant(entry) = ppl_thresholds.entry(window) {
                let texts = matrix.records.iter().flat_map(|r| r.texts());
                if let Some(threshold) = calibrate_threshold(scorer, texts, window, 0.99) {
                    entry.insert(threshold);
                }
            }
        }
    }

    let prepared = prepare_defenses(gateway, matrix, output)?;
    let ctx = MatrixContext {
        gateway,
        matrix,
        prepared,
        ppl_scorer,
        ppl_thresholds,
        baselines: Mutex::new(HashMap::new()),
    };

    let tuples: Vec<Tuple> = matrix
        .records
        .iter()
        .flat_map(|record| {
            matrix.tasks.iter().flat_map(move |&kind| {
                matrix.attackers.iter().flat_map(move |attacker| {
                    matrix
                        .countermeasures
                        .iter()
                        .map(move |countermeasure| Tuple {
                            record,
                            kind,
                            attacker,
                            countermeasure,
                        })
                })
            })
        })
        .collect();

    let expected_keys: std::collections::HashSet<String> = tuples.iter().map(Tuple::key).collect();
    for key in existing.keys() {
        if !expected_keys.contains(key) {
            return Err(EvalError::InvalidMatrix(format!(
                "existing outcomes file contains tuple {key:?} not produced by this matrix; \
                 refusing to resume (use a fresh output directory)"
            )));
        }
    }

    let pending: Vec<usize> = (0..tuples.len())
        .filter(|&i| !existing.contains_key(&tuples[i].key()))
        .collect();

    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&output.outcomes_path)
        .map_err(|e| EvalError::Io {
            path: output.outcomes_path.clone(),
            source: e,
        })?;
    let mut writer = BufWriter::new(file);

    let mut computed: HashMap<usize, AttackOutcome> = HashMap::new();
    {
        let ctx = &ctx;
        let tuples = &tuples;
        let pending_ref = &pending;
        let computed_cell = Mutex::new(&mut computed);
        compute_ordered(
            pending.len(),
            max_concurrency.max(1),
            |slot| evaluate_tuple(ctx, &tuples[pending_ref[slot]]),
            |slot, outcome| {
                append_jsonl(&mut writer, &outcome).map_err(|e| EvalError::Io {
                    path: output.outcomes_path.clone(),
                    source: e,
                })?;
                computed_cell
                    .lock()
                    .expect("computed lock")
                    .insert(pending_ref[slot], outcome);
                Ok(())
            },
        )?;
    }

    // Canonical order, merging resumed and fresh outcomes.
    let mut all = Vec::with_capacity(tuples.len());
    for (i, tuple) in tuples.iter().enumerate() {
        match computed.remove(&i) {
            Some(outcome) => all.push(outcome),
            None => all.push(
                existing
                    .remove(&tuple.key())
                    .expect("covered by pending split"),
            ),
        }
    }
    Ok(all)
}

/// Build a defense pool: run the generation loop over every (record,
/// task) of the matrix and keep the accepted defenses with provenance.
pub fn build_pool(
    gateway: &Gateway,
    matrix: &RunMatrix,
    output: &RunOutput,
) -> Result<DefensePool, EvalError> {
    matrix.validate()?;
    let Some(config) = &matrix.generation else {
        return Err(EvalError::InvalidMatrix(
            "pool building requires a generation config".into(),
        ));
    };
    let mut store = TranscriptStore::open(&output.transcripts_path, output.resume)?;

    let mut entries = Vec::new();
    for record in &matrix.records {
        for &kind in &matrix.tasks {
            let task = build_task(record, kind, &matrix.assets);
            let texts: Vec<(String, String)> = match record.corpus {
                CorpusKind::Rag => record
                    .documents
                    .as_deref()
                    .unwrap_or_default()
                    .iter()
                    .enumerate()
                    .map(|(i, d)| (format!("{}:d{}", record.id, i + 1), d.clone()))
                    .collect(),
                _ => vec![(record.id.clone(), record.text.clone().unwrap_or_default())],
            };
            for (text_id, text) in texts {
                match generate_with_persistence(gateway, &text, &text_id, &task, config, &mut store)?
                {
                    Ok((defense, _)) => {
                        let id = crate::generator::transcript_id(&text_id, &task.id, config);
                        let transcript = store.get(&id).expect("just generated or reloaded");
                        match transcript.accepted {
                            Some(idx) => entries.push(PoolEntry::new(
                                defense,
                                record.id.clone(),
                                kind,
                                config.generator.name.clone(),
                                config.attacker.name.clone(),
                                config.judge.name.clone(),
                                transcript.iterations[idx].rating,
                            )),
                            None => log::warn!(
                                "generation for {text_id} was not accepted; excluded from pool"
                            ),
                        }
                    }
                    Err(message) => log::warn!("pool generation for {text_id} failed: {message}"),
                }
            }
        }
    }
    Ok(DefensePool { entries })
}

/// Run a transfer study: defend the target corpus with pool entries and
/// evaluate. The matrix must use `DefenseSource::Pool`; validation aborts
/// on any overlap between pool source texts and target records.
pub fn transfer_eval(
    gateway: &Gateway,
    matrix: &RunMatrix,
    output: &RunOutput,
    max_concurrency: usize,
) -> Result<(Vec<AttackOutcome>, Vec<SummaryStats>), EvalError> {
    if matrix.defense_source != DefenseSource::Pool {
        return Err(EvalError::InvalidMatrix(
            "transfer evaluation requires defense_source = pool".into(),
        ));
    }
    let outcomes = run_matrix(gateway, matrix, output, max_concurrency)?;
    let summary = summarize(&outcomes);
    Ok((outcomes, summary))
}
