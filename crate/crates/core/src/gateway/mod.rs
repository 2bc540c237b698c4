//! Provider-agnostic chat completion with caching, retries, bounded
//! in-flight requests, cost accounting, and a fully scripted offline
//! provider for tests and reproducible runs.

mod cache;
mod ledger;
mod provider;

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, CachedExchange, ResponseCache};
pub use ledger::{CostLedger, ModelUsage};
pub use provider::{Matcher, ModelSpec, Price, ProviderKind, Script, ScriptRule};

use provider::{estimate_tokens, ProviderResponse, ScriptEngine};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid model spec: {0}")]
    InvalidModelSpec(String),
    #[error("missing credentials for {provider}: set the {var} environment variable")]
    MissingCredentials { provider: String, var: String },
    #[error("offline mode forbids non-scripted provider for model {model}")]
    OfflineRequiresScripted { model: String },
    #[error("scripted model {model} matched no rule and has no default response")]
    ScriptUnmatched { model: String },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider returned status {status}: {message}")]
    Provider { status: u16, message: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    /// Transient failures that a caller may reasonably retry at a higher
    /// level (the gateway has already retried internally).
    pub fn is_transport(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

/// One completed (or cache-served) exchange with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system_prompt: String,
    pub user_content: String,
    pub response_text: String,
    /// The provider declined to answer; the refusal text is recorded
    /// verbatim in `response_text` and flows onward like any output.
    pub refused: bool,
    /// The response hit the output-token limit. Never trimmed silently.
    pub truncated: bool,
    /// New tokens consumed by this call (zero on cache hits).
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_ms: u64,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

/// Wall clock or a fixed instant. Scripted/offline runs use a fixed clock
/// so serialized artifacts are byte-stable across runs.
#[derive(Debug, Clone, Copy)]
pub enum Clock {
    System,
    Fixed(i64),
}

impl Clock {
    pub fn now_rfc3339(&self) -> String {
        let ts = match self {
            Clock::System => chrono::Utc::now(),
            Clock::Fixed(secs) => chrono::DateTime::from_timestamp(*secs, 0).unwrap_or_default(),
        };
        ts.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    }
}

/// Counting semaphore bounding concurrent requests per provider endpoint.
struct InFlightGate {
    max: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

impl InFlightGate {
    fn new(max: usize) -> Self {
        InFlightGate {
            max: max.max(1),
            in_flight: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut count = self.in_flight.lock().expect("gate lock");
        while *count >= self.max {
            count = self.cv.wait(count).expect("gate wait");
        }
        *count += 1;
    }

    fn release(&self) {
        let mut count = self.in_flight.lock().expect("gate lock");
        *count -= 1;
        self.cv.notify_one();
    }
}

pub struct GatewayBuilder {
    cache_dir: Option<std::path::PathBuf>,
    offline: bool,
    retry: RetryPolicy,
    max_in_flight: usize,
    clock: Option<Clock>,
    request_timeout: Duration,
}

impl Default for GatewayBuilder {
    fn default() -> Self {
        GatewayBuilder {
            cache_dir: None,
            offline: false,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            clock: None,
            request_timeout: Duration::from_secs(120),
        }
    }
}

impl GatewayBuilder {
    pub fn cache_dir(mut self, dir: impl AsRef<Path>) -> Self {
        self.cache_dir = Some(dir.as_ref().to_path_buf());
        self
    }

    /// Forbid non-scripted providers and pin the clock to the epoch.
    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn max_in_flight(mut self, max: usize) -> Self {
        self.max_in_flight = max;
        self
    }

    pub fn clock(mut self, clock: Clock) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn request_timeout(mut self, timeout: Duration) -> Self {
        self.request_timeout = timeout;
        self
    }

    pub fn build(self) -> Result<Gateway, GatewayError> {
        let cache = match &self.cache_dir {
            Some(dir) => Some(ResponseCache::open(dir)?),
            None => None,
        };
        let clock = self.clock.unwrap_or(if self.offline {
            Clock::Fixed(0)
        } else {
            Clock::System
        });
        Ok(Gateway {
            cache,
            ledger: Mutex::new(CostLedger::default()),
            http: OnceLock::new(),
            retry: self.retry,
            gates: Mutex::new(HashMap::new()),
            max_in_flight: self.max_in_flight,
            clock,
            offline: self.offline,
            request_timeout: self.request_timeout,
        })
    }
}

/// The completion client shared by every stage of the pipeline.
///
/// Safe to call concurrently; the cache uses last-writer-wins on identical
/// keys and each provider endpoint has a bounded in-flight request count.
pub struct Gateway {
    cache: Option<ResponseCache>,
    ledger: Mutex<CostLedger>,
    http: OnceLock<reqwest::blocking::Client>,
    retry: RetryPolicy,
    gates: Mutex<HashMap<String, std::sync::Arc<InFlightGate>>>,
    max_in_flight: usize,
    clock: Clock,
    offline: bool,
    request_timeout: Duration,
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder::default()
    }

    /// A cache-less, online gateway with default settings.
    pub fn ephemeral() -> Gateway {
        GatewayBuilder::default()
            .build()
            .expect("no cache dir, cannot fail")
    }

    /// The scripted-provider constructor: a model whose completions come
    /// from the given rule table.
    pub fn scripted_provider(name: impl Into<String>, script: Script) -> ModelSpec {
        ModelSpec::scripted(name, script)
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn timestamp(&self) -> String {
        self.clock.now_rfc3339()
    }

    /// Snapshot of the cost ledger.
    pub fn ledger(&self) -> CostLedger {
        self.ledger.lock().expect("ledger lock").clone()
    }

    /// Complete one exchange. Identical `(model, prompts, temperature,
    /// seed)` inputs are served from the cache when caching is enabled;
    /// cache hits report zero new tokens and do not touch the ledger.
    pub fn complete(
        &self,
        spec: &ModelSpec,
        system_prompt: &str,
        user_content: &str,
    ) -> Result<ChatExchange, GatewayError> {
        spec.validate()?;
        let key = cache_key(spec, system_prompt, user_content);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key) {
                return Ok(ChatExchange {
                    system_prompt: system_prompt.to_string(),
                    user_content: user_content.to_string(),
                    response_text: hit.response_text,
                    refused: hit.refused,
                    truncated: hit.truncated,
                    tokens_in: 0,
                    tokens_out: 0,
                    latency_ms: 0,
                    cache_hit: true,
                });
            }
        }

        if self.offline && spec.provider != ProviderKind::Scripted {
            return Err(GatewayError::OfflineRequiresScripted {
                model: spec.name.clone(),
            });
        }

        let started = Instant::now();
        let response = match spec.provider {
            ProviderKind::Scripted => self.scripted_complete(spec, system_prompt, user_content)?,
            _ => self.http_complete(spec, system_prompt, user_content)?,
        };
        let latency_ms = if matches!(spec.provider, ProviderKind::Scripted) {
            0
        } else {
            started.elapsed().as_millis() as u64
        };

        if response.truncated {
            log::warn!(
                "response from {} hit max_output_tokens={} and was flagged as truncated",
                spec.name,
                spec.max_output_tokens
            );
        }

        self.ledger.lock().expect("ledger lock").record(
            &spec.name,
            response.tokens_in,
            response.tokens_out,
            &spec.price,
        );
        if let Some(cache) = &self.cache {
            cache.put(CachedExchange::new(
                key,
                response.text.clone(),
                response.refused,
                response.truncated,
                response.tokens_in,
                response.tokens_out,
            ))?;
        }

        Ok(ChatExchange {
            system_prompt: system_prompt.to_string(),
            user_content: user_content.to_string(),
            response_text: response.text,
            refused: response.refused,
            truncated: response.truncated,
            tokens_in: response.tokens_in,
            tokens_out: response.tokens_out,
            latency_ms,
            cache_hit: false,
        })
    }

    fn scripted_complete(
        &self,
        spec: &ModelSpec,
        system: &str,
        user: &str,
    ) -> Result<ProviderResponse, GatewayError> {
        let script = spec.script.as_ref().expect("validated scripted spec");
        let engine = ScriptEngine::compile(script)?;
        let input = format!("{system}\n{user}");
        let (text, refused) =
            engine
                .respond(&input)
                .ok_or_else(|| GatewayError::ScriptUnmatched {
                    model: spec.name.clone(),
                })?;
        let tokens_out = estimate_tokens(&text);
        Ok(ProviderResponse {
            truncated: tokens_out > u64::from(spec.max_output_tokens),
            tokens_in: estimate_tokens(&input),
            tokens_out,
            text,
            refused,
        })
    }

    fn http_client(&self) -> &reqwest::blocking::Client {
        self.http.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.request_timeout)
                .build()
                .expect("HTTP client builds")
        })
    }

    fn gate_for(&self, endpoint: &str) -> std::sync::Arc<InFlightGate> {
        let mut gates = self.gates.lock().expect("gates lock");
        gates
            .entry(endpoint.to_string())
            .or_insert_with(|| std::sync::Arc::new(InFlightGate::new(self.max_in_flight)))
            .clone()
    }

    fn api_key(&self, spec: &ModelSpec) -> Result<Option<String>, GatewayError> {
        match spec.provider {
            ProviderKind::LocalHttp => Ok(std::env::var("LOCAL_LLM_API_KEY").ok()),
            ProviderKind::Scripted => Ok(None),
            _ => {
                let var = spec
                    .provider
                    .key_var()
                    .expect("remote providers have a key var");
                match std::env::var(var) {
                    Ok(key) if !key.is_empty() => Ok(Some(key)),
                    _ => Err(GatewayError::MissingCredentials {
                        provider: spec.provider.as_str().to_string(),
                        var: var.to_string(),
                    }),
                }
            }
        }
    }

    fn http_complete(
        &self,
        spec: &ModelSpec,
        system: &str,
        user: &str,
    ) -> Result<ProviderResponse, GatewayError> {
        let base = spec.resolved_base_url()?;
        let key = self.api_key(spec)?;
        let (url, body) = match spec.provider {
            ProviderKind::OpenaiCompatible | ProviderKind::LocalHttp => (
                format!("{base}/v1/chat/completions"),
                provider::openai_request_body(spec, system, user),
            ),
            ProviderKind::AnthropicCompatible => (
                format!("{base}/v1/messages"),
                provider::anthropic_request_body(spec, system, user),
            ),
            ProviderKind::GeminiCompatible => (
                format!(
                    "{base}/v1beta/models/{}:generateContent?key={}",
                    spec.model,
                    key.as_deref().unwrap_or_default()
                ),
                provider::gemini_request_body(spec, system, user),
            ),
            ProviderKind::Scripted => unreachable!("dispatched earlier"),
        };

        let gate = self.gate_for(&base);
        gate.acquire();
        let result = self.send_with_retries(spec, &url, &body, key.as_deref());
        gate.release();
        let body_text = result?;

        match spec.provider {
            ProviderKind::OpenaiCompatible | ProviderKind::LocalHttp => {
                provider::parse_openai_response(&body_text)
            }
            ProviderKind::AnthropicCompatible => provider::parse_anthropic_response(&body_text),
            ProviderKind::GeminiCompatible => provider::parse_gemini_response(&body_text),
            ProviderKind::Scripted => unreachable!(),
        }
    }

    /// Transport failures and 429/5xx responses retry with exponential
    /// backoff; other error statuses surface immediately.
    fn send_with_retries(
        &self,
        spec: &ModelSpec,
        url: &str,
        body: &serde_json::Value,
        key: Option<&str>,
    ) -> Result<String, GatewayError> {
        let mut last_error = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            let mut request = self.http_client().post(url).json(body);
            request = match spec.provider {
                ProviderKind::AnthropicCompatible => request
                    .header("x-api-key", key.unwrap_or_default())
                    .header("anthropic-version", "2023-06-01"),
                ProviderKind::GeminiCompatible => request,
                _ => match key {
                    Some(k) => request.bearer_auth(k),
                    None => request,
                },
            };
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    let text = response.text().unwrap_or_default();
                    if status.is_success() {
                        return Ok(text);
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        last_error = format!("status {status}: {text}");
                        continue;
                    }
                    return Err(GatewayError::Provider {
                        status: status.as_u16(),
                        message: text,
                    });
                }
                Err(e) => {
                    last_error = e.to_string();
                }
            }
        }
        Err(GatewayError::Transport {
            attempts: self.retry.max_attempts,
            message: last_error,
        })
    }
}
