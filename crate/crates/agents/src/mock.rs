//! Deterministic LLM backends for tests, demos and offline runs.

use std::collections::BTreeMap;
use std::sync::Mutex;

use i2e_core::codec::{self, ParseError};
use i2e_core::{text, HomophoneLexicon};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::eval::parse_eval_prompt;
use crate::llm::{estimate_tokens, Completion, LlmBackend, LlmError, LlmRequest, ResponseSchema, Usage};
use crate::refine::parse_correctable_lines;

/// One canned reply. A string is returned verbatim; `{"$error": "unavailable"|"auth"}`
/// simulates a hard failure; any other JSON value is returned compactly encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptedReply(pub Value);

impl ScriptedReply {
    fn resolve(&self) -> Result<String, LlmError> {
        match &self.0 {
            Value::String(s) => Ok(s.clone()),
            Value::Object(o) if o.contains_key("$error") => match o["$error"].as_str() {
                Some("auth") => Err(LlmError::AuthFailure("scripted".into())),
                _ => Err(LlmError::BackendUnavailable("scripted".into())),
            },
            other => Ok(other.to_string()),
        }
    }
}

/// Script entry. Matching precedence: `request_hash`, then `contains`
/// (substring of system or user prompt, first entry in file order wins),
/// then `sequence` (zero-based global call index), then the script default.
/// Each entry consumes its replies in order; the last reply repeats.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<usize>,
    pub responses: Vec<ScriptedReply>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ScriptedReply>,
}

fn default_model_id() -> String {
    "mock-script".into()
}

#[derive(Default)]
struct ScriptState {
    calls: usize,
    consumed: BTreeMap<usize, usize>,
    last: Option<LlmRequest>,
}

pub struct ScriptedLlm {
    script: MockScript,
    context_limit: Option<usize>,
    state: Mutex<ScriptState>,
}

impl ScriptedLlm {
    pub fn new(script: MockScript) -> Self {
        ScriptedLlm { script, context_limit: None, state: Mutex::default() }
    }

    pub fn load(bytes: &[u8]) -> Result<Self, ParseError> {
        Ok(Self::new(codec::parse(bytes)?))
    }

    /// Replies served in call order; the last one repeats once they run out.
    pub fn sequence(replies: Vec<String>) -> Self {
        let default = replies.last().map(|r| ScriptedReply(Value::String(r.clone())));
        let entries = replies
            .into_iter()
            .enumerate()
            .map(|(i, r)| ScriptEntry {
                sequence: Some(i),
                responses: vec![ScriptedReply(Value::String(r))],
                ..Default::default()
            })
            .collect();
        Self::new(MockScript { model_id: default_model_id(), entries, default })
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = Some(limit);
        self
    }

    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().calls
    }

    pub fn last_request(&self) -> Option<LlmRequest> {
        self.state.lock().unwrap().last.clone()
    }

    fn pick(&self, req: &LlmRequest, index: usize) -> Option<usize> {
        let hash = req.request_hash();
        let entries = &self.script.entries;
        entries
            .iter()
            .position(|e| e.request_hash.as_deref() == Some(hash.as_str()))
            .or_else(|| {
                entries.iter().position(|e| {
                    e.contains
                        .as_deref()
                        .is_some_and(|c| req.system_prompt.contains(c) || req.user_prompt.contains(c))
                })
            })
            .or_else(|| entries.iter().position(|e| e.sequence == Some(index)))
    }
}

impl LlmBackend for ScriptedLlm {
    fn model_id(&self) -> String {
        self.script.model_id.clone()
    }

    fn context_limit(&self) -> Option<usize> {
        self.context_limit
    }

    fn send(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        let reply = {
            let mut state = self.state.lock().unwrap();
            let index = state.calls;
            state.calls += 1;
            state.last = Some(req.clone());
            match self.pick(req, index) {
                Some(e) => {
                    let used = state.consumed.entry(e).or_insert(0);
                    let replies = &self.script.entries[e].responses;
                    let reply = replies.get(*used).or(replies.last()).cloned();
                    *used += 1;
                    reply
                }
                None => self.script.default.clone(),
            }
        };
        let text = reply
            .ok_or_else(|| LlmError::BackendUnavailable("mock script has no reply for this request".into()))?
            .resolve()?;
        Ok(completion(req, text, self.script.model_id.clone()))
    }
}

fn completion(req: &LlmRequest, text: String, model_id: String) -> Completion {
    Completion {
        usage: Usage {
            prompt_tokens: req.estimated_tokens() as u64,
            completion_tokens: estimate_tokens(&text) as u64,
        },
        text,
        model_id,
    }
}

type Responder = dyn Fn(&LlmRequest) -> Result<String, LlmError> + Send + Sync;

/// Backend driven by a closure; handy for property tests.
pub struct FnLlm {
    model_id: String,
    respond: Box<Responder>,
}

impl FnLlm {
    pub fn new<F>(model_id: impl Into<String>, respond: F) -> Self
    where
        F: Fn(&LlmRequest) -> Result<String, LlmError> + Send + Sync + 'static,
    {
        FnLlm { model_id: model_id.into(), respond: Box::new(respond) }
    }
}

impl LlmBackend for FnLlm {
    fn model_id(&self) -> String {
        self.model_id.clone()
    }

    fn send(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        let text = (self.respond)(req)?;
        Ok(completion(req, text, self.model_id.clone()))
    }
}

/// Rule-based stand-in for a real model.
///
/// Refinement requests: echoes every correctable segment, replacing each
/// lexicon `wrong` form with its `right` form. Evaluation requests: reports the
/// indicator observed when one of its positive examples occurs verbatim in a
/// transcript segment, quoting it; otherwise not observed with a suggestion.
pub struct DeterministicMock {
    lexicon: HomophoneLexicon,
}

impl DeterministicMock {
    pub const MODEL_ID: &'static str = "mock-deterministic";

    pub fn new(lexicon: HomophoneLexicon) -> Self {
        DeterministicMock { lexicon }
    }

    fn refine(&self, req: &LlmRequest) -> String {
        let corrected: BTreeMap<String, String> = parse_correctable_lines(&req.user_prompt)
            .into_iter()
            .map(|(id, _speaker, line)| {
                let fixed = self
                    .lexicon
                    .entries
                    .iter()
                    .fold(line, |acc, e| acc.replace(&e.wrong, &e.right));
                (id, fixed)
            })
            .collect();
        serde_json::to_string(&corrected).expect("string map")
    }

    fn evaluate(&self, req: &LlmRequest) -> String {
        let prompt = parse_eval_prompt(&req.user_prompt);
        let hit = prompt.positive_examples.iter().find_map(|example| {
            prompt
                .segments
                .iter()
                .find(|(_, _, t)| text::contains_verbatim(t, example))
                .map(|(id, _, _)| (id.clone(), example.clone()))
        });
        let out = match hit {
            Some((segment_id, quote)) => serde_json::json!({
                "located_utterances": [{"segment_id": segment_id, "quote": quote}],
                "observed": true,
                "rationale": format!("Segment {segment_id} contains the behavior described by the indicator."),
                "suggestion": "Keep extending exchanges like this one.",
            }),
            None => serde_json::json!({
                "located_utterances": [],
                "observed": false,
                "rationale": "No utterance matches the indicator.",
                "suggestion": match prompt.positive_examples.first() {
                    Some(e) => format!("Try interactions such as: {e}"),
                    None => "Look for opportunities to show this behavior.".to_owned(),
                },
            }),
        };
        out.to_string()
    }
}

impl LlmBackend for DeterministicMock {
    fn model_id(&self) -> String {
        Self::MODEL_ID.into()
    }

    fn send(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        let text = match req.response_schema {
            ResponseSchema::RefineMap { .. } => self.refine(req),
            ResponseSchema::EvalOutput => self.evaluate(req),
            ResponseSchema::Json => "{}".into(),
        };
        Ok(completion(req, text, Self::MODEL_ID.into()))
    }
}
