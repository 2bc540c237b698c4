//! Model specifications and the per-provider transports.

use serde::{Deserialize, Serialize};

use super::GatewayError;

/// Which wire protocol (or script table) serves a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    OpenaiCompatible,
    AnthropicCompatible,
    GeminiCompatible,
    LocalHttp,
    Scripted,
}

impl ProviderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProviderKind::OpenaiCompatible => "openai-compatible",
            ProviderKind::AnthropicCompatible => "anthropic-compatible",
            ProviderKind::GeminiCompatible => "gemini-compatible",
            ProviderKind::LocalHttp => "local-http",
            ProviderKind::Scripted => "scripted",
        }
    }

    /// Environment variable holding the API key, if the provider needs one.
    pub fn key_var(&self) -> Option<&'static str> {
        match self {
            ProviderKind::OpenaiCompatible => Some("OPENAI_API_KEY"),
            ProviderKind::AnthropicCompatible => Some("ANTHROPIC_API_KEY"),
            ProviderKind::GeminiCompatible => Some("GEMINI_API_KEY"),
            // Local servers usually run without auth; the variable is
            // honored when set.
            ProviderKind::LocalHttp | ProviderKind::Scripted => None,
        }
    }

    fn default_base_url(&self) -> Option<&'static str> {
        match self {
            ProviderKind::OpenaiCompatible => Some("https://api.openai.com"),
            ProviderKind::AnthropicCompatible => Some("https://api.anthropic.com"),
            ProviderKind::GeminiCompatible => Some("https://generativelanguage.googleapis.com"),
            ProviderKind::LocalHttp | ProviderKind::Scripted => None,
        }
    }
}

/// Per-token pricing, in currency units per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Price {
    #[serde(default)]
    pub input_per_million: f64,
    #[serde(default)]
    pub output_per_million: f64,
}

/// A literal-substring or regular-expression matcher for scripted rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Substring(String),
    Regex(String),
}

/// One scripted-provider rule. Rules are evaluated in ascending `priority`
/// order; ties break by declaration order. For regex matchers the response
/// may reference capture groups (`$1`, `$2`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub matcher: Matcher,
    #[serde(default)]
    pub priority: i32,
    pub response: String,
    #[serde(default)]
    pub refusal: bool,
}

/// A deterministic response table standing in for a live model.
///
/// Rules are matched against `"{system}\n{user}"`, so a rule can key on
/// either side of the exchange. Unmatched input gets `default_response`
/// when configured, otherwise the call fails.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default_response: Option<String>,
}

impl Script {
    pub fn rule(mut self, matcher: Matcher, response: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            matcher,
            priority: 0,
            response: response.into(),
            refusal: false,
        });
        self
    }

    pub fn substring(self, needle: impl Into<String>, response: impl Into<String>) -> Self {
        self.rule(Matcher::Substring(needle.into()), response)
    }

    pub fn regex(self, pattern: impl Into<String>, response: impl Into<String>) -> Self {
        self.rule(Matcher::Regex(pattern.into()), response)
    }

    pub fn default_response(mut self, response: impl Into<String>) -> Self {
        self.default_response = Some(response.into());
        self
    }
}

enum CompiledMatcher {
    Substring(String),
    Regex(regex::Regex),
}

/// A [`Script`] with its regexes compiled and rules sorted by priority.
pub(crate) struct ScriptEngine {
    rules: Vec<(CompiledMatcher, String, bool)>,
    default_response: Option<String>,
}

impl ScriptEngine {
    pub(crate) fn compile(script: &Script) -> Result<Self, GatewayError> {
        let mut indexed: Vec<(usize, &ScriptRule)> = script.rules.iter().enumerate().collect();
        indexed.sort_by_key(|(idx, rule)| (rule.priority, *idx));
        let mut rules = Vec::with_capacity(indexed.len());
        for (_, rule) in indexed {
            let compiled = match &rule.matcher {
                Matcher::Substring(s) => CompiledMatcher::Substring(s.clone()),
                Matcher::Regex(pattern) => {
                    CompiledMatcher::Regex(regex::Regex::new(pattern).map_err(|e| {
                        GatewayError::InvalidModelSpec(format!("bad script regex {pattern:?}: {e}"))
                    })?)
                }
            };
            rules.push((compiled, rule.response.clone(), rule.refusal));
        }
        Ok(ScriptEngine {
            rules,
            default_response: script.default_response.clone(),
        })
    }

    /// First matching rule wins; regex responses expand capture groups.
    pub(crate) fn respond(&self, input: &str) -> Option<(String, bool)> {
        for (matcher, response, refusal) in &self.rules {
            match matcher {
                CompiledMatcher::Substring(needle) => {
                    if input.contains(needle.as_str()) {
                        return Some((response.clone(), *refusal));
                    }
                }
                CompiledMatcher::Regex(re) => {
                    if let Some(caps) = re.captures(input) {
                        let mut expanded = String::new();
                        caps.expand(response, &mut expanded);
                        return Some((expanded, *refusal));
                    }
                }
            }
        }
        self.default_response.as_ref().map(|r| (r.clone(), false))
    }
}

/// Everything needed to address one model: provider, model name, sampling
/// settings, pricing, and (for the scripted provider) the response table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Display/registry name used in ledgers and result records.
    pub name: String,
    pub provider: ProviderKind,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub price: Price,
    #[serde(default)]
    pub script: Option<Script>,
}

impl ModelSpec {
    /// A scripted model answering from the given response table.
    pub fn scripted(name: impl Into<String>, script: Script) -> Self {
        let name = name.into();
        ModelSpec {
            model: name.clone(),
            name,
            provider: ProviderKind::Scripted,
            temperature: 0.0,
            max_output_tokens: 4096,
            seed: Some(0),
            base_url: None,
            price: Price::default(),
            script: Some(script),
        }
    }

    /// Same spec with a different sampling seed (used to vary re-queries).
    pub fn with_seed(&self, seed: u64) -> Self {
        ModelSpec {
            seed: Some(seed),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model.is_empty() {
            return Err(GatewayError::InvalidModelSpec("model name is empty".into()));
        }
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidModelSpec(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidModelSpec(
                "max_output_tokens must be positive".into(),
            ));
        }
        if self.provider == ProviderKind::Scripted && self.script.is_none() {
            return Err(GatewayError::InvalidModelSpec(format!(
                "scripted model {:?} has no script table",
                self.name
            )));
        }
        if self.provider == ProviderKind::LocalHttp && self.base_url.is_none() {
            return Err(GatewayError::InvalidModelSpec(format!(
                "local-http model {:?} needs base_url",
                self.name
            )));
        }
        if self.price.input_per_million < 0.0 || self.price.output_per_million < 0.0 {
            return Err(GatewayError::InvalidModelSpec(
                "prices must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn resolved_base_url(&self) -> Result<String, GatewayError> {
        self.base_url
            .clone()
            .or_else(|| self.provider.default_base_url().map(str::to_string))
            .ok_or_else(|| {
                GatewayError::InvalidModelSpec(format!("model {:?} has no base URL", self.name))
            })
    }
}

/// Crude token estimate (~4 chars per token) used by the scripted provider
/// so that offline runs still exercise usage accounting.
pub(crate) fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Raw result of one provider round trip, before caching and accounting.
pub(crate) struct ProviderResponse {
    pub text: String,
    pub refused: bool,
    pub truncated: bool,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

// --- OpenAI-compatible wire types ------------------------------------------

#[derive(Serialize)]
struct OpenAiRequest<'a> {
    model: &'a str,
    messages: Vec<OpenAiMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct OpenAiMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct OpenAiResponse {
    choices: Vec<OpenAiChoice>,
    #[serde(default)]
    usage: Option<OpenAiUsage>,
}

#[derive(Deserialize)]
struct OpenAiChoice {
    message: OpenAiChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct OpenAiChoiceMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    refusal: Option<String>,
}

#[derive(Deserialize)]
struct OpenAiUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub(crate) fn openai_request_body(spec: &ModelSpec, system: &str, user: &str) -> serde_json::Value {
    serde_json::to_value(OpenAiRequest {
        model: &spec.model,
        messages: vec![
            OpenAiMessage {
                role: "system",
                content: system,
            },
            OpenAiMessage {
                role: "user",
                content: user,
            },
        ],
        temperature: spec.temperature,
        max_tokens: spec.max_output_tokens,
        seed: spec.seed,
    })
    .expect("request serializes")
}

pub(crate) fn parse_openai_response(body: &str) -> Result<ProviderResponse, GatewayError> {
    let parsed: OpenAiResponse = serde_json::from_str(body)
        .map_err(|e| GatewayError::MalformedResponse(format!("openai body: {e}")))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::MalformedResponse("openai body: no choices".into()))?;
    let (text, refused) = match choice.message.refusal {
        Some(refusal) => (refusal, true),
        None => (choice.message.content.unwrap_or_default(), false),
    };
    let usage = parsed.usage.unwrap_or(OpenAiUsage {
        prompt_tokens: 0,
        completion_tokens: 0,
    });
    Ok(ProviderResponse {
        text,
        refused,
        truncated: choice.finish_reason.as_deref() == Some("length"),
        tokens_in: usage.prompt_tokens,
        tokens_out: usage.completion_tokens,
    })
}

// --- Anthropic-compatible wire types ----------------------------------------

#[derive(Serialize)]
struct AnthropicRequest<'a> {
    model: &'a str,
    system: &'a str,
    messages: Vec<OpenAiMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct AnthropicResponse {
    content: Vec<AnthropicContent>,
    #[serde(default)]
    stop_reason: Option<String>,
    #[serde(default)]
    usage: Option<AnthropicUsage>,
}

#[derive(Deserialize)]
struct AnthropicContent {
    #[serde(default)]
    text: Option<String>,
}

#[derive(Deserialize)]
struct AnthropicUsage {
    #[serde(default)]
    input_tokens: u64,
    #[serde(default)]
    output_tokens: u64,
}

pub(crate) fn anthropic_request_body(
    spec: &ModelSpec,
    system: &str,
    user: &str,
) -> serde_json::Value {
    // The messages API has no sampling-seed parameter; the seed still
    // participates in the cache key.
    serde_json::to_value(AnthropicRequest {
        model: &spec.model,
        system,
        messages: vec![OpenAiMessage {
            role: "user",
            content: user,
        }],
        temperature: spec.temperature,
        max_tokens: spec.max_output_tokens,
    })
    .expect("request serializes")
}

pub(crate) fn parse_anthropic_response(body: &str) -> Result<ProviderResponse, GatewayError> {
    let parsed: AnthropicResponse = serde_json::from_str(body)
        .map_err(|e| GatewayError::MalformedResponse(format!("anthropic body: {e}")))?;
    let text: String = parsed
        .content
        .into_iter()
        .filter_map(|c| c.text)
        .collect::<Vec<_>>()
        .join("");
    let usage = parsed.usage.unwrap_or(AnthropicUsage {
        input_tokens: 0,
        output_tokens: 0,
    });
    let stop = parsed.stop_reason.as_deref();
    Ok(ProviderResponse {
        text,
        refused: stop == Some("refusal"),
        truncated: stop == Some("max_tokens"),
        tokens_in: usage.input_tokens,
        tokens_out: usage.output_tokens,
    })
}

// --- Gemini-compatible wire types -------------------------------------------

pub(crate) fn gemini_request_body(spec: &ModelSpec, system: &str, user: &str) -> serde_json::Value {
    let mut generation = serde_json::json!({
        "temperature": spec.temperature,
        "maxOutputTokens": spec.max_output_tokens,
    });
    if let Some(seed) = spec.seed {
        generation["seed"] = serde_json::json!(seed);
    }
    serde_json::json!({
        "systemInstruction": { "parts": [{ "text": system }] },
        "contents": [{ "role": "user", "parts": [{ "text": user }] }],
        "generationConfig": generation,
    })
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct GeminiResponse {
    #[serde(default)]
    candidates: Vec<GeminiCandidate>,
    #[serde(default)]
    prompt_feedback: Option<GeminiPromptFeedback>,
    #[serde(default)]
    usage_metadata: Option<GeminiUsage>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct GeminiCandidate {
    #[serde(default)]
    content: Option<GeminiContent>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct GeminiContent {
    #[serde(default)]
    parts: Vec<GeminiPart>,
}

#[derive(Deserialize)]
struct GeminiPart {
    #[serde(default)]
    text: Option<String>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct GeminiPromptFeedback {
    #[serde(default)]
    block_reason: Option<String>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct GeminiUsage {
    #[serde(default)]
    prompt_token_count: u64,
    #[serde(default)]
    candidates_token_count: u64,
}

pub(crate) fn parse_gemini_response(body: &str) -> Result<ProviderResponse, GatewayError> {
    let parsed: GeminiResponse = serde_json::from_str(body)
        .map_err(|e| GatewayError::MalformedResponse(format!("gemini body: {e}")))?;
    let usage = parsed.usage_metadata.unwrap_or(GeminiUsage {
        prompt_token_count: 0,
        candidates_token_count: 0,
    });
    if let Some(feedback) = parsed.prompt_feedback {
        if let Some(reason) = feedback.block_reason {
            return Ok(ProviderResponse {
                text: format!("blocked: {reason}"),
                refused: true,
                truncated: false,
                tokens_in: usage.prompt_token_count,
                tokens_out: usage.candidates_token_count,
            });
        }
    }
    let candidate = parsed
        .candidates
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::MalformedResponse("gemini body: no candidates".into()))?;
    let finish = candidate.finish_reason.clone().unwrap_or_default();
    let text: String = candidate
        .content
        .map(|c| {
            c.parts
                .into_iter()
                .filter_map(|p| p.text)
                .collect::<Vec<_>>()
                .join("")
        })
        .unwrap_or_default();
    let refused = matches!(
        finish.as_str(),
        "SAFETY" | "PROHIBITED_CONTENT" | "BLOCKLIST"
    );
    Ok(ProviderResponse {
        text: if refused && text.is_empty() {
            format!("blocked: {finish}")
        } else {
            text
        },
        refused,
        truncated: finish == "MAX_TOKENS",
        tokens_in: usage.prompt_token_count,
        tokens_out: usage.candidates_token_count,
    })
}
