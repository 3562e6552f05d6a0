//! HTTP adapters for real backends: a wire-format ASR service and an
//! OpenAI-compatible chat-completions endpoint.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::asr::{AsrBackend, AsrBackendConfig, AsrCallError, AsrReply, AsrRequest, WireSegment};
use crate::llm::{Completion, LlmBackend, LlmError, LlmRequest, Usage};

fn agent(timeout_ms: u64) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(Duration::from_millis(timeout_ms)).build()
}

fn token_from_env(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|v| !v.is_empty())
}

/// Posts the request to `endpoint_url`; the service answers with a JSON
/// list of wire segments.
pub struct HttpAsr;

impl HttpAsr {
    fn check_audio(uri: Option<&str>) -> Result<(), AsrCallError> {
        let uri = uri.ok_or_else(|| AsrCallError::AudioUnreadable("session has no audio_uri".into()))?;
        let local = uri.strip_prefix("file://").or((!uri.contains("://")).then_some(uri));
        if let Some(path) = local {
            if !Path::new(path).is_file() {
                return Err(AsrCallError::AudioUnreadable(format!("{path} does not exist")));
            }
        }
        Ok(())
    }
}

impl AsrBackend for HttpAsr {
    fn name(&self) -> String {
        "http".into()
    }

    fn call(&self, req: &AsrRequest, cfg: &AsrBackendConfig) -> Result<AsrReply, AsrCallError> {
        Self::check_audio(req.audio_uri.as_deref())?;
        let token = token_from_env(&cfg.auth_token_env)
            .ok_or_else(|| AsrCallError::Auth(format!("credential variable {} is not set", cfg.auth_token_env)))?;
        let started = Instant::now();
        let resp = agent(cfg.timeout_ms)
            .post(&cfg.endpoint_url)
            .set("Authorization", &format!("Bearer {token}"))
            .set("Idempotency-Key", &req.idempotency_key)
            .send_json(req);
        match resp {
            Ok(r) => {
                let body = r.into_string().map_err(|e| AsrCallError::Transient(e.to_string()))?;
                let segments: Vec<WireSegment> =
                    serde_json::from_str(&body).map_err(|e| AsrCallError::Malformed(e.to_string()))?;
                Ok(AsrReply { segments, latency_ms: started.elapsed().as_millis() as u64 })
            }
            Err(ureq::Error::Status(code, r)) => {
                let body = r.into_string().unwrap_or_default();
                Err(match code {
                    401 | 403 => AsrCallError::Auth(format!("HTTP {code}")),
                    415 | 422 => AsrCallError::AudioUnreadable(format!("HTTP {code}: {body}")),
                    408 | 429 | 500..=599 => AsrCallError::Transient(format!("HTTP {code}")),
                    _ => AsrCallError::Malformed(format!("HTTP {code}: {body}")),
                })
            }
            Err(e) => Err(AsrCallError::Transient(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpLlmConfig {
    /// Full chat-completions URL.
    pub endpoint_url: String,
    pub auth_token_env: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_limit: Option<usize>,
}

impl Default for HttpLlmConfig {
    fn default() -> Self {
        HttpLlmConfig {
            endpoint_url: String::new(),
            auth_token_env: "I2E_LLM_TOKEN".into(),
            model: String::new(),
            timeout_ms: 120_000,
            max_retries: 2,
            retry_backoff_ms: 1000,
            context_limit: None,
        }
    }
}

impl HttpLlmConfig {
    /// Fills endpoint and model from `I2E_LLM_ENDPOINT` / `I2E_LLM_MODEL` when unset.
    pub fn with_env_defaults(mut self) -> Self {
        if self.endpoint_url.is_empty() {
            self.endpoint_url = std::env::var("I2E_LLM_ENDPOINT").unwrap_or_default();
        }
        if self.model.is_empty() {
            self.model = std::env::var("I2E_LLM_MODEL").unwrap_or_default();
        }
        self
    }
}

pub struct HttpLlm {
    cfg: HttpLlmConfig,
}

impl HttpLlm {
    pub fn new(cfg: HttpLlmConfig) -> Self {
        HttpLlm { cfg }
    }

    fn body(&self, req: &LlmRequest) -> Value {
        json!({
            "model": self.cfg.model,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.rendered_user_prompt()},
            ],
        })
    }

    fn parse(&self, body: &str) -> Result<Completion, LlmError> {
        let v: Value = serde_json::from_str(body).map_err(|e| LlmError::BackendUnavailable(format!("bad response body: {e}")))?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::BackendUnavailable("response has no choices[0].message.content".into()))?
            .to_owned();
        let n = |p: &str| v.pointer(p).and_then(Value::as_u64).unwrap_or(0);
        Ok(Completion {
            text,
            usage: Usage { prompt_tokens: n("/usage/prompt_tokens"), completion_tokens: n("/usage/completion_tokens") },
            model_id: v.get("model").and_then(Value::as_str).unwrap_or(&self.cfg.model).to_owned(),
        })
    }
}

impl LlmBackend for HttpLlm {
    fn model_id(&self) -> String {
        self.cfg.model.clone()
    }

    fn context_limit(&self) -> Option<usize> {
        self.cfg.context_limit
    }

    fn send(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        let token = token_from_env(&self.cfg.auth_token_env)
            .ok_or_else(|| LlmError::AuthFailure(format!("credential variable {} is not set", self.cfg.auth_token_env)))?;
        let agent = agent(self.cfg.timeout_ms);
        let body = self.body(req);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let reason = match agent
                .post(&self.cfg.endpoint_url)
                .set("Authorization", &format!("Bearer {token}"))
                .send_json(&body)
            {
                Ok(r) => {
                    let text = r.into_string().map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
                    return self.parse(&text);
                }
                Err(ureq::Error::Status(401 | 403, _)) => return Err(LlmError::AuthFailure("HTTP 401/403".into())),
                Err(ureq::Error::Status(code @ (408 | 429 | 500..=599), _)) => format!("HTTP {code}"),
                Err(ureq::Error::Status(code, r)) => {
                    let detail = r.into_string().unwrap_or_default();
                    return Err(LlmError::BackendUnavailable(format!("HTTP {code}: {detail}")));
                }
                Err(e) => e.to_string(),
            };
            if attempt > self.cfg.max_retries {
                return Err(LlmError::BackendUnavailable(format!("{reason} after {attempt} attempts")));
            }
            tracing::warn!(attempt, %reason, "LLM call failed, retrying");
            std::thread::sleep(Duration::from_millis(self.cfg.retry_backoff_ms));
        }
    }
}
