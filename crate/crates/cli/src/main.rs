//! Operator surface: defend a text, build a defense pool, run evaluation
//! matrices, transfer studies, and reports — all driven by one config
//! file. Flags override config; environment variables carry only secrets.

mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use chaff_core::defense::insert;
use chaff_core::defense::InsertionPolicy;
use chaff_core::eval::{
    build_pool, emit_intrusiveness, emit_summary, format_summary_table, intrusiveness_analysis,
    load_outcomes, run_matrix, summarize, transfer_eval, DefenseSource, EvalError, RunOutput,
    DEFAULT_RATIO_BIN_EDGES,
};
use chaff_core::gateway::{Gateway, GatewayError, RetryPolicy};
use chaff_core::generator::{
    generate_defense, GenerationError, GenerationTranscript, ReferenceMode,
};
use chaff_core::harness::{AttackTask, TaskKind};
use chaff_core::util::{content_hash, stable_seed};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: unknown matrix, missing/empty input, bad flags.
    Usage(String),
    /// Invalid or inconsistent configuration or data files.
    Config(String),
    /// Provider-side failure: credentials, transport, remote errors.
    Provider(String),
    /// Defense generation finished without an accepted candidate.
    NotAccepted,
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Config(_) => 3,
            CliError::Provider(_) => 4,
            CliError::NotAccepted => 2,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m)
            | CliError::Config(m)
            | CliError::Provider(m)
            | CliError::Other(m) => m.clone(),
            CliError::NotAccepted => {
                "no candidate reached the acceptance threshold; best-effort defense emitted".into()
            }
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::MissingCredentials { .. }
            | GatewayError::Transport { .. }
            | GatewayError::Provider { .. }
            | GatewayError::OfflineRequiresScripted { .. } => CliError::Provider(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Gateway(inner) => inner.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "chaff",
    about = "Generate prompt-injection data defenses for text and evaluate them against attacker models"
)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, default_value = "chaff.toml")]
    config: PathBuf,
    /// Override matrix seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on concurrent outcome evaluations.
    #[arg(long, global = true, default_value_t = 1)]
    max_concurrency: usize,
    /// Override the cache directory from the config.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Continue from existing outcomes/transcripts instead of starting over.
    #[arg(long, global = true)]
    resume: bool,
    /// Forbid non-scripted providers and pin timestamps (reproducible runs).
    #[arg(long, global = true)]
    offline: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a defense for one text and print the defended text.
    Defend {
        /// File containing the text to defend (or use --text).
        #[arg(long, conflicts_with = "text")]
        input: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
        /// Attack to defend against: pii_gender, pii_birthdate,
        /// pii_location or rag_question.
        #[arg(long)]
        task: String,
        /// Known true attribute value; enables ground-truth judging.
        #[arg(long)]
        ground_truth: Option<String>,
        /// Question for rag_question tasks.
        #[arg(long)]
        question: Option<String>,
        /// Write the defended text here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write a JSON sidecar marking the insertion span.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Build a defense pool from a generation matrix.
    Pool {
        #[arg(long)]
        matrix: String,
        /// Pool output file (default: <out>/<matrix>/pool.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an evaluation matrix and emit summary + plot data.
    Eval {
        #[arg(long)]
        matrix: String,
    },
    /// Evaluate pooled defenses on a disjoint target corpus.
    Transfer {
        #[arg(long)]
        matrix: String,
        /// Defense pool file (overrides the matrix's pool_path).
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Re-emit reports from an existing outcomes file.
    Report {
        #[arg(long)]
        matrix: String,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {}", err.message());
        std::process::exit(err.exit_code());
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = RunConfig::load(&cli.config)?;
    match &cli.command {
        Command::Defend {
            input,
            text,
            task,
            ground_truth,
            question,
            out,
            sidecar,
        } => cmd_defend(
            cli,
            &config,
            input.as_deref(),
            text.as_deref(),
            task,
            ground_truth.as_deref(),
            question.as_deref(),
            out.as_deref(),
            sidecar.as_deref(),
        ),
        Command::Pool { matrix, out } => cmd_pool(cli, &config, matrix, out.as_deref()),
        Command::Eval { matrix } => cmd_eval(cli, &config, matrix),
        Command::Transfer { matrix, pool } => cmd_transfer(cli, &config, matrix, pool.as_deref()),
        Command::Report { matrix } => cmd_report(cli, &config, matrix),
    }
}

fn build_gateway(cli: &Cli, config: &RunConfig) -> Result<Gateway, CliError> {
    let mut builder = Gateway::builder()
        .offline(cli.offline)
        .max_in_flight(config.gateway.max_in_flight)
        .retry(RetryPolicy {
            max_attempts: config.gateway.max_attempts,
            base_delay: std::time::Duration::from_millis(config.gateway.backoff_ms),
        });
    if config.gateway.cache {
        let dir = cli
            .cache_dir
            .clone()
            .or_else(|| config.cache_dir.clone())
            .unwrap_or_else(|| out_root(cli, config).join("cache"));
        builder = builder.cache_dir(dir);
    }
    Ok(builder.build()?)
}

fn out_root(cli: &Cli, config: &RunConfig) -> PathBuf {
    cli.out_dir
        .clone()
        .unwrap_or_else(|| config.output_dir.clone())
}

fn matrix_output(cli: &Cli, config: &RunConfig, matrix: &str) -> RunOutput {
    let dir = out_root(cli, config).join(matrix);
    RunOutput {
        outcomes_path: dir.join("outcomes.jsonl"),
        transcripts_path: dir.join("transcripts.jsonl"),
        resume: cli.resume,
    }
}

fn write_ledger(gateway: &Gateway, dir: &Path) -> Result<(), CliError> {
    let ledger = gateway.ledger();
    let body = serde_json::to_string_pretty(&ledger)
        .map_err(|e| CliError::Other(format!("ledger serialize: {e}")))?;
    std::fs::write(dir.join("ledger.json"), body)
        .map_err(|e| CliError::Other(format!("ledger write: {e}")))?;
    Ok(())
}

fn parse_task_kind(raw: &str) -> Result<TaskKind, CliError> {
    match raw {
        "pii_gender" => Ok(TaskKind::PiiGender),
        "pii_birthdate" => Ok(TaskKind::PiiBirthdate),
        "pii_location" => Ok(TaskKind::PiiLocation),
        "rag_question" => Ok(TaskKind::RagQuestion),
        other => Err(CliError::Usage(format!(
            "unknown task kind {other:?}; expected pii_gender, pii_birthdate, pii_location or rag_question"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_defend(
    cli: &Cli,
    config: &RunConfig,
    input: Option<&Path>,
    text: Option<&str>,
    task_raw: &str,
    ground_truth: Option<&str>,
    question: Option<&str>,
    out: Option<&Path>,
    sidecar: Option<&Path>,
) -> Result<(), CliError> {
    let text = match (input, text) {
        (Some(path), None) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read input {path:?}: {e}")))?,
        (None, Some(text)) => text.to_string(),
        _ => {
            return Err(CliError::Usage(
                "provide exactly one of --input or --text".into(),
            ))
        }
    };
    if text.trim().is_empty() {
        return Err(CliError::Usage("input text is empty".into()));
    }

    let kind = parse_task_kind(task_raw)?;
    if kind == TaskKind::RagQuestion && question.is_none() {
        return Err(CliError::Usage("rag_question tasks need --question".into()));
    }
    let assets = config.assets()?;
    let mut generation = config.generation_config(&assets)?;
    if let Some(seed) = cli.seed {
        generation.insertion_policy = generation.insertion_policy.with_seed(seed);
    }
    // With a labeled value the judge compares against ground truth;
    // otherwise against the attacker's inference on the unprotected text.
    generation.reference_mode = if ground_truth.is_some() {
        ReferenceMode::GroundTruth
    } else {
        ReferenceMode::Baseline
    };

    let template = match kind {
        TaskKind::RagQuestion => assets.attack_rag.clone(),
        _ => assets.attack_pii.clone(),
    };
    let text_id = format!("input-{}", &content_hash(text.as_bytes())[..12]);
    let task = AttackTask {
        id: format!("{text_id}:{}", kind.as_str()),
        kind,
        prompt_template: template,
        ground_truth: ground_truth.map(str::to_string),
        question: question.map(str::to_string),
    };

    let gateway = build_gateway(cli, config)?;
    let transcript_path = out_root(cli, config).join("defend").join("transcripts.jsonl");
    let mut store = TranscriptStore::open(&transcript_path, cli.resume)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let id = transcript_id(&text_id, &task.id, &generation);
    let resume = store.get(&id).cloned();

    let outcome = match generate_defense(&gateway, &text, &text_id, &task, &generation, resume) {
        Ok(outcome) => outcome,
        Err(GenerationError::ModelFailure {
            iteration,
            source,
            partial,
        }) => {
            store
                .append(&partial)
                .map_err(|e| CliError::Other(e.to_string()))?;
            return Err(CliError::Provider(format!(
                "model failure at iteration {iteration} (partial transcript {id} saved to {transcript_path:?}): {source}"
            )));
        }
        Err(other) => return Err(CliError::Config(other.to_string())),
    };
    store
        .append(&outcome.transcript)
        .map_err(|e| CliError::Other(e.to_string()))?;

    let chosen = outcome
        .transcript
        .accepted
        .or_else(|| outcome.transcript.best_iteration())
        .expect("generation produced iterations");
    let offset = outcome.transcript.iterations[chosen].insertion_offset;
    let defended = insert(&text, &outcome.defense, &InsertionPolicy::fixed(offset))
        .map_err(|e| CliError::Other(e.to_string()))?;

    match out {
        Some(path) => std::fs::write(path, &defended.defended)
            .map_err(|e| CliError::Other(format!("write {path:?}: {e}")))?,
        None => print!("{}", defended.defended),
    }
    if let Some(path) = sidecar {
        let span = serde_json::json!({
            "v": 1,
            "insertion_offset": defended.insertion_offset,
            "defense_length": outcome.defense.text.len(),
            "length_ratio": defended.length_ratio,
            "accepted": outcome.accepted,
            "rating": outcome.transcript.iterations[chosen].rating,
            "transcript_id": outcome.transcript.id,
            "transcripts_file": transcript_path,
        });
        std::fs::write(path, serde_json::to_string_pretty(&span).unwrap())
            .map_err(|e| CliError::Other(format!("write sidecar {path:?}: {e}")))?;
    }
    eprintln!(
        "defense {} after {} attacker queries (rating {}); transcript {} in {}",
        if outcome.accepted {
            "accepted"
        } else {
            "NOT accepted (best effort)"
        },
        outcome.transcript.attacker_query_count,
        outcome.transcript.iterations[chosen].rating,
        outcome.transcript.id,
        transcript_path.display(),
    );
    if outcome.accepted {
        Ok(())
    } else {
        Err(CliError::NotAccepted)
    }
}

fn cmd_pool(
    cli: &Cli,
    config: &RunConfig,
    matrix_name: &str,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let matrix = config.resolve_matrix(matrix_name, cli.seed, None)?;
    if matrix.defense_source != DefenseSource::GenerateFresh {
        return Err(CliError::Usage(format!(
            "matrix {matrix_name:?} must use defense_source = \"generate_fresh\" to build a pool"
        )));
    }
    let gateway = build_gateway(cli, config)?;
    let output = matrix_output(cli, config, matrix_name);
    let pool = build_pool(&gateway, &matrix, &output)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_root(cli, config).join(matrix_name).join("pool.jsonl"));
    pool.save(&path)?;
    if let Some(parent) = path.parent() {
        write_ledger(&gateway, parent)?;
    }
    println!(
        "pool written to {} ({} accepted defenses)",
        path.display(),
        pool.len()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, config: &RunConfig, matrix_name: &str) -> Result<(), CliError> {
    let matrix = config.resolve_matrix(matrix_name, cli.seed, None)?;
    let gateway = build_gateway(cli, config)?;
    let output = matrix_output(cli, config, matrix_name);
    let outcomes = run_matrix(&gateway, &matrix, &output, cli.max_concurrency)?;

    let stats = summarize(&outcomes);
    let dir = output
        .outcomes_path
        .parent()
        .expect("outcomes path has a parent");
    let written = emit_summary(&stats, dir)?;
    if outcomes.iter().any(|o| o.length_ratio.is_some()) {
        let bins = intrusiveness_analysis(&outcomes, &DEFAULT_RATIO_BIN_EDGES);
        if !bins.is_empty() {
            emit_intrusiveness(&bins, dir)?;
        }
    }
    write_ledger(&gateway, dir)?;

    print!("{}", format_summary_table(&stats));
    let errors: u64 = stats.iter().map(|s| s.errors).sum();
    if errors > 0 {
        println!("note: {errors} outcome(s) errored; see the error column and outcomes file");
    }
    println!(
        "outcomes: {}\nreports: {}",
        output.outcomes_path.display(),
        written
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

fn cmd_transfer(
    cli: &Cli,
    config: &RunConfig,
    matrix_name: &str,
    pool: Option<&Path>,
) -> Result<(), CliError> {
    let matrix = config.resolve_matrix(matrix_name, cli.seed, pool)?;
    if matrix.defense_source != DefenseSource::Pool {
        return Err(CliError::Usage(format!(
            "matrix {matrix_name:?} must use defense_source = \"pool\" for transfer evaluation"
        )));
    }
    let gateway = build_gateway(cli, config)?;
    let output = matrix_output(cli, config, matrix_name);
    let (outcomes, stats) = transfer_eval(&gateway, &matrix, &output, cli.max_concurrency)?;
    let dir = output
        .outcomes_path
        .parent()
        .expect("outcomes path has a parent");
    emit_summary(&stats, dir)?;
    write_ledger(&gateway, dir)?;
    print!("{}", format_summary_table(&stats));
    println!(
        "transfer outcomes: {} over {} records",
        outcomes.len(),
        matrix.records.len()
    );
    Ok(())
}

fn cmd_report(cli: &Cli, config: &RunConfig, matrix_name: &str) -> Result<(), CliError> {
    let output = matrix_output(cli, config, matrix_name);
    if !output.outcomes_path.exists() {
        return Err(CliError::Usage(format!(
            "no outcomes at {:?}; run `chaff eval --matrix {matrix_name}` first",
            output.outcomes_path
        )));
    }
    let outcomes = load_outcomes(&output.outcomes_path)?;
    let stats = summarize(&outcomes);
    let dir = output
        .outcomes_path
        .parent()
        .expect("outcomes path has a parent");
    let written = emit_summary(&stats, dir)?;
    if outcomes.iter().any(|o| o.length_ratio.is_some()) {
        let bins = intrusiveness_analysis(&outcomes, &DEFAULT_RATIO_BIN_EDGES);
        if !bins.is_empty() {
            emit_intrusiveness(&bins, dir)?;
        }
    }
    print!("{}", format_summary_table(&stats));
    println!(
        "reports: {}",
        written
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}
