//! Evaluation agent: one evidence-first judgment per language-accessible indicator.

use std::sync::atomic::{AtomicUsize, Ordering};

use i2e_core::{
    text, validate_transcript, Evidence, Indicator, IndicatorJudgment, Meta, Rubric, Transcript, Validation,
    Violation,
};
use serde::{Deserialize, Serialize};

use crate::limit::map_bounded;
use crate::llm::{complete, estimate_tokens, LlmBackend, LlmError, LlmRequest, ResponseSchema};
use crate::refine::{parse_segment_line, section_lines};

pub const DEFAULT_PROMPT_VERSION: &str = "eval-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    /// Estimated tokens per request; transcripts that do not fit are chunked.
    pub token_budget: usize,
    pub repair_retries: u32,
    /// Re-prompt once when the evidence check flags a reply.
    pub reprompt_on_flag: bool,
    pub concurrency: usize,
    pub prompt_version: String,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            token_budget: 24_000,
            repair_retries: 2,
            reprompt_on_flag: true,
            concurrency: 4,
            prompt_version: DEFAULT_PROMPT_VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalTask<'a> {
    pub session_id: &'a str,
    pub indicator: &'a Indicator,
    pub transcript: &'a Transcript,
    pub prompt_version: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRawOutput {
    pub located_utterances: Vec<Evidence>,
    pub observed: bool,
    pub rationale: String,
    pub suggestion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("transcript has no segments")]
    EmptyTranscript,
    #[error("invalid transcript: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidTranscript(Vec<Violation>),
    #[error("every indicator evaluation failed at the backend: {0}")]
    SessionEvalFailed(LlmError),
}

const EVAL_SYSTEM_PROMPT: &str = "You assess teacher-child interaction quality in Mandarin preschool classroom \
transcripts against one rubric indicator at a time. Work evidence first: locate the utterances that bear on \
the indicator, quote them exactly, and only then decide. Never invent or paraphrase quotes.";

pub const SECTION_INDICATOR: &str = "## Indicator";
pub const SECTION_POSITIVE: &str = "## Positive examples";
pub const SECTION_NEGATIVE: &str = "## Negative examples";
pub const SECTION_TRANSCRIPT: &str = "## Transcript";
pub const SECTION_INSTRUCTIONS: &str = "## Instructions";

fn indicator_block(ind: &Indicator) -> String {
    let mut p = format!(
        "{SECTION_INDICATOR}\nid: {}\nlevel: {}\ndescription: {}\n\n{SECTION_POSITIVE}\n",
        ind.id, ind.level, ind.description
    );
    for e in &ind.positive_examples {
        p.push_str(&format!("- {e}\n"));
    }
    p.push_str(&format!("\n{SECTION_NEGATIVE}\n"));
    for e in &ind.negative_examples {
        p.push_str(&format!("- {e}\n"));
    }
    p
}

fn instructions(chunk: usize, chunks: usize) -> String {
    let scope = if chunks > 1 {
        format!(" This is part {} of {} of the transcript; judge only this part.", chunk + 1, chunks)
    } else {
        String::new()
    };
    format!(
        "\n{SECTION_INSTRUCTIONS}\n\
         Step 1: list every utterance relevant to the indicator as {{\"segment_id\", \"quote\"}}, where quote is an \
         exact substring of that segment's text.{scope}\n\
         Step 2: decide whether the indicator is observed, based only on the located utterances.\n\
         Step 3: give a short rationale and a concrete suggestion for improvement (required when not observed).\n\
         Reply with only JSON matching this schema:\n{}\n",
        ResponseSchema::EvalOutput.describe()
    )
}

/// One request per transcript chunk; a single request when the whole
/// transcript fits `token_budget`.
pub fn build_eval_prompts(task: &EvalTask, token_budget: usize) -> Vec<LlmRequest> {
    let header = indicator_block(task.indicator);
    let fixed = estimate_tokens(EVAL_SYSTEM_PROMPT)
        + estimate_tokens(&header)
        + estimate_tokens(&instructions(98, 99))
        + estimate_tokens(SECTION_TRANSCRIPT)
        + 2;
    let room = token_budget.saturating_sub(fixed);

    let lines: Vec<String> = task.transcript.segments.iter().map(|s| s.render()).collect();
    let mut chunks: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    while start < lines.len() {
        let mut end = start;
        let mut used = 0;
        while end < lines.len() {
            let c = estimate_tokens(&lines[end]) + 1;
            if end > start && used + c > room {
                break;
            }
            used += c;
            end += 1;
        }
        chunks.push(start..end);
        start = end;
    }
    if chunks.is_empty() {
        chunks.push(0..0);
    }

    let n = chunks.len();
    chunks
        .into_iter()
        .enumerate()
        .map(|(k, range)| {
            let mut p = header.clone();
            p.push_str(&format!("\n{SECTION_TRANSCRIPT}\n"));
            for l in &lines[range] {
                p.push_str(l);
                p.push('\n');
            }
            p.push_str(&instructions(k, n));
            LlmRequest::new(EVAL_SYSTEM_PROMPT.into(), p, ResponseSchema::EvalOutput)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalPrompt {
    pub indicator_id: String,
    pub positive_examples: Vec<String>,
    pub negative_examples: Vec<String>,
    /// `(id, speaker, text)`
    pub segments: Vec<(String, String, String)>,
}

pub fn parse_eval_prompt(prompt: &str) -> EvalPrompt {
    let examples = |header| -> Vec<String> {
        section_lines(prompt, header)
            .filter_map(|l| l.strip_prefix("- ").map(str::to_owned))
            .collect()
    };
    EvalPrompt {
        indicator_id: section_lines(prompt, SECTION_INDICATOR)
            .find_map(|l| l.strip_prefix("id: ").map(str::to_owned))
            .unwrap_or_default(),
        positive_examples: examples(SECTION_POSITIVE),
        negative_examples: examples(SECTION_NEGATIVE),
        segments: section_lines(prompt, SECTION_TRANSCRIPT).filter_map(parse_segment_line).collect(),
    }
}

/// Every quote must be an exact (NFC) substring of the segment it cites, and
/// an observed indicator needs at least one quote.
pub fn validate_evidence(observed: bool, evidence: &[Evidence], t: &Transcript) -> Validation {
    if observed && evidence.is_empty() {
        return Validation::FlaggedNoEvidence;
    }
    let sound = evidence.iter().all(|e| {
        !e.quote.trim().is_empty()
            && t.segment(&e.segment_id).is_some_and(|s| text::contains_verbatim(&s.text, &e.quote))
    });
    if sound {
        Validation::Valid
    } else {
        Validation::FlaggedQuoteMismatch
    }
}

fn flag_note(v: Validation, out: &EvalRawOutput) -> String {
    match v {
        Validation::FlaggedNoEvidence => {
            "You reported the indicator as observed but located no utterance. Quote the supporting utterances \
             or report it as not observed."
                .into()
        }
        _ => {
            let bad: Vec<String> = out
                .located_utterances
                .iter()
                .map(|e| format!("{} \"{}\"", e.segment_id, e.quote))
                .collect();
            format!(
                "At least one quote is not an exact substring of the cited segment ({}). Copy quotes verbatim.",
                bad.join(", ")
            )
        }
    }
}

struct ChunkResult {
    parsed: Option<(EvalRawOutput, Validation)>,
    retries: u32,
    reprompted: bool,
    model_id: String,
}

fn run_chunk(req: &LlmRequest, t: &Transcript, backend: &dyn LlmBackend, params: &EvalParams) -> Result<ChunkResult, LlmError> {
    let attempt = |req: &LlmRequest| -> Result<(Option<(EvalRawOutput, Validation)>, u32, String), LlmError> {
        let resp = complete(req, backend, params.repair_retries)?;
        let parsed = resp.parsed.ok().and_then(|v| serde_json::from_value::<EvalRawOutput>(v).ok()).map(|mut out| {
            for e in &mut out.located_utterances {
                e.quote = text::nfc(&e.quote);
            }
            let v = validate_evidence(out.observed, &out.located_utterances, t);
            (out, v)
        });
        Ok((parsed, resp.retries, resp.model_id))
    };

    let (parsed, retries, model_id) = attempt(req)?;
    if let Some((out, v)) = &parsed {
        if v.is_flagged() && params.reprompt_on_flag {
            let mut again = req.clone();
            again.repair_note = Some(flag_note(*v, out));
            let (second, r2, model_id) = attempt(&again)?;
            // A failed repair keeps the original flagged reply.
            let parsed = match second {
                Some(s) => Some(s),
                None => parsed,
            };
            return Ok(ChunkResult { parsed, retries: retries + r2 + 1, reprompted: true, model_id });
        }
    }
    Ok(ChunkResult { parsed, retries, reprompted: false, model_id })
}

/// Judges one indicator. A backend hard failure on any chunk is returned as
/// an error; an unparseable reply yields a `FlaggedEvalFailure` judgment.
pub fn evaluate_indicator(task: &EvalTask, backend: &dyn LlmBackend, params: &EvalParams) -> Result<IndicatorJudgment, LlmError> {
    let requests = build_eval_prompts(task, params.token_budget);
    let mut results = Vec::with_capacity(requests.len());
    for req in &requests {
        results.push(run_chunk(req, task.transcript, backend, params)?);
    }

    let outputs: Vec<&(EvalRawOutput, Validation)> = results.iter().filter_map(|r| r.parsed.as_ref()).collect();
    let valid_observed: Vec<&EvalRawOutput> =
        outputs.iter().filter(|(o, v)| o.observed && *v == Validation::Valid).map(|(o, _)| o).collect();
    let flagged = outputs.iter().find(|(o, v)| o.observed && v.is_flagged());
    let unparsed = results.iter().any(|r| r.parsed.is_none());

    let nonempty = |s: &str| (!s.trim().is_empty()).then(|| s.to_owned());
    let (observed, evidence, rationale, suggestion, validation) = if !valid_observed.is_empty() {
        (
            true,
            valid_observed.iter().flat_map(|o| o.located_utterances.clone()).collect(),
            valid_observed.iter().map(|o| o.rationale.as_str()).collect::<Vec<_>>().join(" "),
            valid_observed.iter().find_map(|o| nonempty(&o.suggestion)),
            Validation::Valid,
        )
    } else if let Some((o, v)) = flagged {
        (true, o.located_utterances.clone(), o.rationale.clone(), nonempty(&o.suggestion), *v)
    } else if unparsed {
        let reason = "the model reply could not be parsed against the output schema".to_owned();
        (false, Vec::new(), reason, None, Validation::FlaggedEvalFailure)
    } else {
        (
            false,
            Vec::new(),
            outputs.iter().map(|(o, _)| o.rationale.as_str()).collect::<Vec<_>>().join(" "),
            outputs.iter().find_map(|(o, _)| nonempty(&o.suggestion)),
            Validation::Valid,
        )
    };

    let mut meta = Meta::new();
    meta.insert("model_id".into(), results.first().map(|r| r.model_id.clone()).unwrap_or_else(|| backend.model_id()));
    meta.insert("prompt_version".into(), task.prompt_version.to_owned());
    meta.insert("retries".into(), results.iter().map(|r| r.retries).sum::<u32>().to_string());
    meta.insert("chunks".into(), results.len().to_string());
    meta.insert("reprompted".into(), results.iter().any(|r| r.reprompted).to_string());
    meta.insert("session_id".into(), task.session_id.to_owned());

    Ok(IndicatorJudgment {
        indicator_id: task.indicator.id.clone(),
        observed,
        evidence,
        rationale,
        suggestion,
        validation,
        overridden_by: None,
        model_meta: meta,
    })
}

fn eval_failure(ind: &Indicator, err: &LlmError, params: &EvalParams, backend: &dyn LlmBackend) -> IndicatorJudgment {
    let mut meta = Meta::new();
    meta.insert("model_id".into(), backend.model_id());
    meta.insert("prompt_version".into(), params.prompt_version.clone());
    meta.insert("error".into(), err.to_string());
    IndicatorJudgment {
        indicator_id: ind.id.clone(),
        observed: false,
        evidence: Vec::new(),
        rationale: format!("evaluation failed: {err}"),
        suggestion: None,
        validation: Validation::FlaggedEvalFailure,
        overridden_by: None,
        model_meta: meta,
    }
}

/// One judgment per language-accessible indicator, in rubric order.
/// `progress(done, total)` is called after each indicator finishes.
pub fn evaluate_session(
    rubric: &Rubric,
    t: &Transcript,
    backend: &dyn LlmBackend,
    params: &EvalParams,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<Vec<IndicatorJudgment>, EvalError> {
    if t.segments.is_empty() {
        return Err(EvalError::EmptyTranscript);
    }
    let violations = validate_transcript(t, None);
    if !violations.is_empty() {
        return Err(EvalError::InvalidTranscript(violations));
    }
    let indicators: Vec<&Indicator> = rubric.accessible_indicators().collect();
    let total = indicators.len();
    let done = AtomicUsize::new(0);
    let results = map_bounded(&indicators, params.concurrency, |_, ind| {
        let task = EvalTask { session_id: &t.session_id, indicator: ind, transcript: t, prompt_version: &params.prompt_version };
        let r = evaluate_indicator(&task, backend, params);
        progress(done.fetch_add(1, Ordering::SeqCst) + 1, total);
        r
    });

    if let Some(Err(first)) = results.first() {
        if results.iter().all(|r| r.is_err()) {
            return Err(EvalError::SessionEvalFailed(first.clone()));
        }
    }
    Ok(indicators
        .iter()
        .zip(results)
        .map(|(ind, r)| {
            r.unwrap_or_else(|e| {
                tracing::warn!(indicator = %ind.id, error = %e, "indicator evaluation failed");
                eval_failure(ind, &e, params, backend)
            })
        })
        .collect())
}
