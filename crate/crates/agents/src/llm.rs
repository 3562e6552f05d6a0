//! Chat-style LLM gateway: request assembly, structured-output validation
//! with repair retries, and token estimation for window sizing.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::limit::{RateLimiter, Semaphore};

/// Expected shape of a structured response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum ResponseSchema {
    /// JSON object mapping segment id to corrected text. `allowed_keys` is
    /// advertised to the model; key-set compliance is judged by the caller.
    RefineMap { allowed_keys: Vec<String> },
    /// Evidence-first indicator judgment.
    EvalOutput,
    /// Any JSON value.
    Json,
}

impl ResponseSchema {
    pub fn id(&self) -> &'static str {
        match self {
            ResponseSchema::RefineMap { .. } => "refine-map",
            ResponseSchema::EvalOutput => "eval-output",
            ResponseSchema::Json => "json",
        }
    }

    /// JSON-schema rendering included in prompts.
    pub fn describe(&self) -> String {
        let schema = match self {
            ResponseSchema::RefineMap { allowed_keys } => {
                let props: serde_json::Map<String, Value> = allowed_keys
                    .iter()
                    .map(|k| (k.clone(), serde_json::json!({"type": "string"})))
                    .collect();
                serde_json::json!({
                    "type": "object",
                    "properties": props,
                    "required": allowed_keys,
                    "additionalProperties": false,
                })
            }
            ResponseSchema::EvalOutput => serde_json::json!({
                "type": "object",
                "properties": {
                    "located_utterances": {"type": "array", "items": {
                        "type": "object",
                        "properties": {"segment_id": {"type": "string"}, "quote": {"type": "string"}},
                        "required": ["segment_id", "quote"]}},
                    "observed": {"type": "boolean"},
                    "rationale": {"type": "string"},
                    "suggestion": {"type": "string"}
                },
                "required": ["located_utterances", "observed", "rationale", "suggestion"]
            }),
            ResponseSchema::Json => serde_json::json!({}),
        };
        serde_json::to_string_pretty(&schema).expect("static schema")
    }

    /// Parses `raw` and checks its shape; the error string is fed back to the
    /// model on a repair attempt.
    pub fn validate(&self, raw: &str) -> Result<Value, String> {
        let body = strip_code_fence(raw);
        let value: Value = serde_json::from_str(body).map_err(|e| format!("response is not valid JSON: {e}"))?;
        match self {
            ResponseSchema::Json => {}
            ResponseSchema::RefineMap { .. } => {
                let obj = value.as_object().ok_or("response must be a JSON object keyed by segment id")?;
                if let Some((k, _)) = obj.iter().find(|(_, v)| !v.is_string()) {
                    return Err(format!("value for key {k:?} must be a string"));
                }
            }
            ResponseSchema::EvalOutput => {
                let obj = value.as_object().ok_or("response must be a JSON object")?;
                let utterances = obj
                    .get("located_utterances")
                    .and_then(Value::as_array)
                    .ok_or("`located_utterances` must be an array")?;
                for (i, u) in utterances.iter().enumerate() {
                    let ok = u.get("segment_id").is_some_and(Value::is_string)
                        && u.get("quote").is_some_and(Value::is_string);
                    if !ok {
                        return Err(format!("located_utterances[{i}] needs string `segment_id` and `quote`"));
                    }
                }
                let observed = obj.get("observed").and_then(Value::as_bool).ok_or("`observed` must be a boolean")?;
                obj.get("rationale").and_then(Value::as_str).ok_or("`rationale` must be a string")?;
                let suggestion = obj.get("suggestion").and_then(Value::as_str).ok_or("`suggestion` must be a string")?;
                if !observed && suggestion.trim().is_empty() {
                    return Err("`suggestion` must be non-empty when `observed` is false".into());
                }
            }
        }
        Ok(value)
    }
}

fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub response_schema: ResponseSchema,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Violation of the previous attempt, appended to the user prompt on repair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair_note: Option<String>,
}

impl LlmRequest {
    pub fn new(system_prompt: String, user_prompt: String, response_schema: ResponseSchema) -> Self {
        LlmRequest {
            system_prompt,
            user_prompt,
            response_schema,
            temperature: 0.0,
            max_output_tokens: 4096,
            repair_note: None,
        }
    }

    /// The user message as sent, including any repair note.
    pub fn rendered_user_prompt(&self) -> String {
        match &self.repair_note {
            None => self.user_prompt.clone(),
            Some(note) => format!(
                "{}\n\nYour previous reply was rejected: {note}\nReply again with only JSON that conforms to the schema.",
                self.user_prompt
            ),
        }
    }

    /// Stable across repair attempts of the same request.
    pub fn request_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_prompt.as_bytes());
        h.update([0]);
        h.update(self.user_prompt.as_bytes());
        h.update([0]);
        h.update(self.response_schema.id().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn estimated_tokens(&self) -> usize {
        estimate_tokens(&self.system_prompt) + estimate_tokens(&self.rendered_user_prompt())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    fn add(&mut self, other: Usage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

/// One raw reply from a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub reason: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub raw_text: String,
    pub parsed: Result<Value, ParseFailure>,
    pub usage: Usage,
    pub model_id: String,
    /// Repair attempts used beyond the first call.
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    #[error("LLM backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("LLM authentication failed: {0}")]
    AuthFailure(String),
    #[error("request needs ~{estimated} tokens, backend limit is {limit}")]
    ContextLengthExceeded { estimated: usize, limit: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
}

pub trait LlmBackend: Send + Sync {
    fn model_id(&self) -> String;

    /// Maximum prompt size in estimated tokens, if known.
    fn context_limit(&self) -> Option<usize> {
        None
    }

    fn send(&self, req: &LlmRequest) -> Result<Completion, LlmError>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for Arc<T> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn context_limit(&self) -> Option<usize> {
        (**self).context_limit()
    }
    fn send(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        (**self).send(req)
    }
}

/// Sends `req`, validating against its schema and re-prompting with the
/// violation up to `repair_retries` times. Schema failure after the last
/// attempt comes back as `parsed: Err(ParseFailure)`, never as a guess.
pub fn complete(req: &LlmRequest, backend: &dyn LlmBackend, repair_retries: u32) -> Result<LlmResponse, LlmError> {
    if req.system_prompt.trim().is_empty() && req.user_prompt.trim().is_empty() {
        return Err(LlmError::EmptyPrompt);
    }
    if let Some(limit) = backend.context_limit() {
        let estimated = req.estimated_tokens();
        if estimated > limit {
            return Err(LlmError::ContextLengthExceeded { estimated, limit });
        }
    }

    let mut current = req.clone();
    let mut usage = Usage::default();
    let mut attempt = 0;
    loop {
        let reply = backend.send(&current)?;
        usage.add(reply.usage);
        match current.response_schema.validate(&reply.text) {
            Ok(value) => {
                return Ok(LlmResponse {
                    raw_text: reply.text,
                    parsed: Ok(value),
                    usage,
                    model_id: reply.model_id,
                    retries: attempt,
                })
            }
            Err(violation) if attempt < repair_retries => {
                tracing::debug!(attempt, %violation, "schema violation, re-prompting");
                current.repair_note = Some(violation);
                attempt += 1;
            }
            Err(violation) => {
                return Ok(LlmResponse {
                    raw_text: reply.text,
                    parsed: Err(ParseFailure { reason: violation, attempts: attempt + 1 }),
                    usage,
                    model_id: reply.model_id,
                    retries: attempt,
                })
            }
        }
    }
}

/// Conservative token estimate: one token per non-ASCII character (CJK and
/// the like) plus one per four ASCII characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    let (ascii, other) = text
        .chars()
        .fold((0usize, 0usize), |(a, o), c| if c.is_ascii() { (a + 1, o) } else { (a, o + 1) });
    other + ascii.div_ceil(4)
}

/// Caps concurrent requests (and optionally request rate) to a backend.
pub struct Limited<B> {
    inner: B,
    permits: Semaphore,
    rate: Option<RateLimiter>,
}

impl<B: LlmBackend> Limited<B> {
    pub fn new(inner: B, max_concurrent: usize) -> Self {
        Limited { inner, permits: Semaphore::new(max_concurrent), rate: None }
    }

    pub fn with_min_interval(mut self, interval: Duration) -> Self {
        self.rate = Some(RateLimiter::new(interval));
        self
    }
}

impl<B: LlmBackend> LlmBackend for Limited<B> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }
    fn context_limit(&self) -> Option<usize> {
        self.inner.context_limit()
    }
    fn send(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        let _permit = self.permits.acquire();
        if let Some(rate) = &self.rate {
            rate.wait();
        }
        self.inner.send(req)
    }
}
