//! Toolkit for protecting text against unwanted LLM inference.
//!
//! The pipeline: compose or automatically generate a short adversarial
//! injection (a "defense"), insert it into a document, then measure how
//! reliably attacker models equipped with countermeasures still extract
//! the protected information.
//!
//! Modules map onto the stages of that pipeline:
//!
//! - [`gateway`] — provider-agnostic chat completion with caching, retries
//!   and cost accounting, plus a fully scripted offline provider.
//! - [`defense`] — defense texts, insertion into documents, intrusiveness.
//! - [`generator`] — the sample/attack/judge loop that produces defenses
//!   automatically.
//! - [`countermeasure`] — the attacker-side pre/post transforms that try to
//!   neutralize or detect defenses.
//! - [`harness`] — runs one complete attack through a countermeasure
//!   pipeline and judges the outcome.
//! - [`eval`] — corpora, experiment matrices, aggregation and reports.

pub mod assets;
pub mod countermeasure;
pub mod defense;
pub mod eval;
pub mod gateway;
pub mod generator;
pub mod harness;
pub mod util;

pub use defense::{DefendedDocument, Defense, InsertionMode, InsertionPolicy, StrategyTag};
pub use gateway::{ChatExchange, CostLedger, Gateway, GatewayError, ModelSpec, ProviderKind};
pub use generator::{GenerationConfig, GenerationTranscript, JudgeRating, ReferenceMode};
pub use harness::{AttackOutcome, AttackTask, TaskKind};

/// Schema version stamped into every serialized record.
pub const SCHEMA_VERSION: u32 = 1;
