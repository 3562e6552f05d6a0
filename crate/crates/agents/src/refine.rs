//! Refinement agent: windowed, context-aware correction of raw ASR text.
//!
//! The transcript is partitioned into consecutive windows of correctable
//! segments, each flanked by read-only context. The model returns a map keyed
//! by segment id, so every correction lands back on its original segment with
//! timestamps and speaker labels untouched. A window whose reply breaks the
//! contract is rejected whole and keeps its raw text.

use std::collections::{BTreeMap, BTreeSet};

use i2e_core::{
    text, validate_transcript, HomophoneLexicon, Provenance, Segment, Transcript, Violation,
};
use serde::{Deserialize, Serialize};

use crate::limit::map_bounded;
use crate::llm::{complete, estimate_tokens, LlmBackend, LlmError, LlmRequest, LlmResponse, ResponseSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowParams {
    pub window_size: usize,
    pub context_size: usize,
    /// Estimated tokens allowed for one window's segment lines (correctable plus context).
    pub token_budget: usize,
}

impl Default for WindowParams {
    fn default() -> Self {
        WindowParams { window_size: 30, context_size: 5, token_budget: 6000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub correctable_ids: Vec<String>,
    pub context_before_ids: Vec<String>,
    pub context_after_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub windows: Vec<Window>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    IdSetMismatch,
    SpeakerLabelEdit,
    EmptyText,
    ParseFailure,
    /// The backend hard-failed for this window.
    BackendFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowCorrection {
    pub window_index: usize,
    pub correctable_ids: Vec<String>,
    /// Empty when rejected.
    pub corrections: BTreeMap<String, String>,
    pub rejected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
}

impl WindowCorrection {
    pub fn accepted(window_index: usize, window: &Window, corrections: BTreeMap<String, String>) -> Self {
        WindowCorrection {
            window_index,
            correctable_ids: window.correctable_ids.clone(),
            corrections,
            rejected: false,
            reject_reason: None,
        }
    }

    pub fn rejected(window_index: usize, window: &Window, reason: RejectReason) -> Self {
        WindowCorrection {
            window_index,
            correctable_ids: window.correctable_ids.clone(),
            corrections: BTreeMap::new(),
            rejected: true,
            reject_reason: Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RefineError {
    #[error("transcript has no segments")]
    EmptyTranscript,
    #[error("only raw transcripts can be refined")]
    NotRaw,
    #[error("invalid raw transcript: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidInput(Vec<Violation>),
    #[error("window parameters out of range: {0}")]
    InvalidParams(String),
    #[error("every refinement window failed at the backend: {0}")]
    AllWindowsFailed(LlmError),
    #[error(transparent)]
    Apply(#[from] ApplyError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ApplyError {
    #[error("segments {0:?} belong to no correction window")]
    CoverageGap(Vec<String>),
    #[error("segment {0} is covered by more than one correction window")]
    DuplicateCorrection(String),
}

/// Greedy partition into windows of at most `window_size` segments whose
/// rendered lines (with context) fit `token_budget`. A single segment that
/// does not fit alone still gets its own window.
pub fn plan_windows(t: &Transcript, params: WindowParams) -> Result<WindowPlan, RefineError> {
    if t.segments.is_empty() {
        return Err(RefineError::EmptyTranscript);
    }
    if params.window_size == 0 {
        return Err(RefineError::InvalidParams("window_size must be at least 1".into()));
    }
    let n = t.segments.len();
    let cost: Vec<usize> = t.segments.iter().map(|s| estimate_tokens(&s.render()) + 1).collect();
    let span_cost = |start: usize, end: usize| -> usize {
        let lo = start.saturating_sub(params.context_size);
        let hi = (end + params.context_size).min(n);
        cost[lo..hi].iter().sum()
    };

    let ids = |range: std::ops::Range<usize>| -> Vec<String> {
        t.segments[range].iter().map(|s| s.id.clone()).collect()
    };
    let mut windows = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && end - start < params.window_size && span_cost(start, end + 1) <= params.token_budget {
            end += 1;
        }
        windows.push(Window {
            correctable_ids: ids(start..end),
            context_before_ids: ids(start.saturating_sub(params.context_size)..start),
            context_after_ids: ids(end..(end + params.context_size).min(n)),
        });
        start = end;
    }
    Ok(WindowPlan { windows })
}

const REFINE_SYSTEM_PROMPT: &str = "You are a transcript editor for Mandarin preschool classroom recordings \
of teacher-child interaction. The input is preschool classroom speech produced by automatic speech recognition \
and likely contains homophone errors that are common in educational settings, as well as misrecognized \
classroom vocabulary. Correct recognition errors while preserving the original meaning and speaker \
attributions. Edit text only: never change segment ids or speaker labels, and never merge, split, add or \
drop segments.";

pub const SECTION_PAIRS: &str = "## Frequent confusion pairs";
pub const SECTION_CONTEXT_BEFORE: &str = "## Read-only context before";
pub const SECTION_CORRECT: &str = "## Segments to correct";
pub const SECTION_CONTEXT_AFTER: &str = "## Read-only context after";
pub const SECTION_OUTPUT: &str = "## Output";
pub const READ_ONLY_TAG: &str = "(read-only)";

pub fn build_refine_prompt(window: &Window, t: &Transcript, lexicon: &HomophoneLexicon) -> LlmRequest {
    let index = t.segment_index();
    let line = |id: &String| index.get(id.as_str()).map(|s| s.render());
    let context_line = |id: &String| {
        index
            .get(id.as_str())
            .map(|s| format!("[{}|{}] {READ_ONLY_TAG} {}", s.id, s.speaker, s.text))
    };

    let mut p = String::new();
    p.push_str(SECTION_PAIRS);
    p.push('\n');
    if lexicon.is_empty() {
        p.push_str("No confusion pairs provided.\n");
    } else {
        for e in &lexicon.entries {
            p.push_str(&format!(
                "- {} ({}) is often misheard as {} ({}); pinyin: {}\n",
                e.right, e.gloss_right, e.wrong, e.gloss_wrong, e.pinyin
            ));
        }
    }
    if !window.context_before_ids.is_empty() {
        p.push_str(&format!("\n{SECTION_CONTEXT_BEFORE}\n"));
        for l in window.context_before_ids.iter().filter_map(context_line) {
            p.push_str(&l);
            p.push('\n');
        }
    }
    p.push_str(&format!("\n{SECTION_CORRECT}\n"));
    for l in window.correctable_ids.iter().filter_map(line) {
        p.push_str(&l);
        p.push('\n');
    }
    if !window.context_after_ids.is_empty() {
        p.push_str(&format!("\n{SECTION_CONTEXT_AFTER}\n"));
        for l in window.context_after_ids.iter().filter_map(context_line) {
            p.push_str(&l);
            p.push('\n');
        }
    }

    let schema = ResponseSchema::RefineMap { allowed_keys: window.correctable_ids.clone() };
    p.push_str(&format!(
        "\n{SECTION_OUTPUT}\nReturn only a JSON object mapping every segment id listed under \"Segments to correct\" \
         to its corrected text (text only, no id or speaker prefix). Return the text unchanged when it needs no \
         correction. Allowed keys: {}. Schema:\n{}\n",
        window.correctable_ids.join(", "),
        schema.describe()
    ));

    LlmRequest::new(REFINE_SYSTEM_PROMPT.into(), p, schema)
}

/// `(id, speaker, text)` for every line in the correctable section of a refine prompt.
pub fn parse_correctable_lines(prompt: &str) -> Vec<(String, String, String)> {
    section_lines(prompt, SECTION_CORRECT).filter_map(parse_segment_line).collect()
}

pub(crate) fn section_lines<'a>(prompt: &'a str, header: &'a str) -> impl Iterator<Item = &'a str> + 'a {
    prompt
        .lines()
        .skip_while(move |l| l.trim() != header)
        .skip(1)
        .take_while(|l| !l.starts_with("## "))
        .filter(|l| !l.trim().is_empty())
}

/// Parses a `[id|speaker] text` line.
pub fn parse_segment_line(line: &str) -> Option<(String, String, String)> {
    let rest = line.strip_prefix('[')?;
    let (tag, text) = rest.split_once("] ")?;
    let (id, speaker) = tag.split_once('|')?;
    Some((id.to_owned(), speaker.to_owned(), text.to_owned()))
}

fn edits_speaker_label(raw: &Segment, corrected: &str) -> bool {
    const ROLE_PREFIXES: [&str; 10] =
        ["老师：", "老师:", "幼儿：", "幼儿:", "孩子：", "孩子:", "teacher:", "child:", "Teacher:", "Child:"];
    let c = corrected.trim_start();
    let bracketed = c.starts_with('[') && c.split_once(']').is_some_and(|(tag, _)| tag.contains('|'));
    let prefixed = ROLE_PREFIXES.iter().any(|p| c.starts_with(p) && !raw.text.trim_start().starts_with(p));
    bracketed || prefixed
}

/// Judges one model reply against the window contract.
pub fn validate_correction(
    window_index: usize,
    window: &Window,
    t: &Transcript,
    response: &LlmResponse,
) -> WindowCorrection {
    let reject = |reason| WindowCorrection::rejected(window_index, window, reason);
    let Ok(value) = &response.parsed else {
        return reject(RejectReason::ParseFailure);
    };
    let Some(obj) = value.as_object() else {
        return reject(RejectReason::ParseFailure);
    };
    let want: BTreeSet<&str> = window.correctable_ids.iter().map(String::as_str).collect();
    let got: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
    if want != got {
        return reject(RejectReason::IdSetMismatch);
    }
    let index = t.segment_index();
    let mut corrections = BTreeMap::new();
    for (id, v) in obj {
        let Some(corrected) = v.as_str() else {
            return reject(RejectReason::ParseFailure);
        };
        if corrected.trim().is_empty() {
            return reject(RejectReason::EmptyText);
        }
        if edits_speaker_label(index[id.as_str()], corrected) {
            return reject(RejectReason::SpeakerLabelEdit);
        }
        corrections.insert(id.clone(), text::nfc(corrected.trim()));
    }
    WindowCorrection::accepted(window_index, window, corrections)
}

pub const META_WINDOWS: &str = "refine.windows";
pub const META_REJECTED: &str = "refine.rejected_windows";

/// Folds window corrections onto the raw transcript. Accepted windows replace
/// text; rejected windows (or accepted ones whose key set is off) keep raw text.
pub fn apply_corrections(t_raw: &Transcript, corrections: &[WindowCorrection]) -> Result<Transcript, ApplyError> {
    let mut owner: BTreeMap<&str, &WindowCorrection> = BTreeMap::new();
    for wc in corrections {
        for id in &wc.correctable_ids {
            if owner.insert(id.as_str(), wc).is_some() {
                return Err(ApplyError::DuplicateCorrection(id.clone()));
            }
        }
    }
    let gaps: Vec<String> = t_raw
        .segments
        .iter()
        .filter(|s| !owner.contains_key(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    if !gaps.is_empty() {
        return Err(ApplyError::CoverageGap(gaps));
    }

    let usable = |wc: &WindowCorrection| {
        !wc.rejected
            && wc.corrections.len() == wc.correctable_ids.len()
            && wc.correctable_ids.iter().all(|id| wc.corrections.contains_key(id))
    };

    let mut refined = t_raw.clone();
    refined.provenance = Provenance::Refined;
    for seg in &mut refined.segments {
        let wc = owner[seg.id.as_str()];
        if usable(wc) {
            seg.text = wc.corrections[&seg.id].clone();
        }
    }

    let mut rejected: Vec<(usize, String)> = corrections
        .iter()
        .filter(|wc| !usable(wc))
        .map(|wc| {
            let reason = wc.reject_reason.unwrap_or(RejectReason::IdSetMismatch);
            (wc.window_index, serde_json::to_value(reason).unwrap().as_str().unwrap().to_owned())
        })
        .collect();
    rejected.sort();
    refined.source_meta.insert(META_WINDOWS.into(), corrections.len().to_string());
    if !rejected.is_empty() {
        let list: Vec<String> = rejected.iter().map(|(i, r)| format!("{i}:{r}")).collect();
        refined.source_meta.insert(META_REJECTED.into(), list.join(","));
    }
    Ok(refined)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineParams {
    pub window: WindowParams,
    pub repair_retries: u32,
    /// Windows refined in parallel.
    pub concurrency: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams { window: WindowParams::default(), repair_retries: 2, concurrency: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowAudit {
    pub index: usize,
    pub correctable_ids: Vec<String>,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentAudit {
    pub id: String,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineAudit {
    pub windows: Vec<WindowAudit>,
    pub segments: Vec<SegmentAudit>,
    pub changed_segments: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineOutcome {
    pub transcript: Transcript,
    pub audit: RefineAudit,
}

/// plan → one model call per window → validate → fold.
pub fn refine(
    t_raw: &Transcript,
    lexicon: &HomophoneLexicon,
    backend: &dyn LlmBackend,
    params: RefineParams,
) -> Result<RefineOutcome, RefineError> {
    if t_raw.provenance != Provenance::Raw {
        return Err(RefineError::NotRaw);
    }
    let violations = validate_transcript(t_raw, None);
    if !violations.is_empty() {
        return Err(RefineError::InvalidInput(violations));
    }
    let plan = plan_windows(t_raw, params.window)?;

    let results = map_bounded(&plan.windows, params.concurrency, |i, window| {
        let req = build_refine_prompt(window, t_raw, lexicon);
        match complete(&req, backend, params.repair_retries) {
            Ok(resp) => (validate_correction(i, window, t_raw, &resp), Some(resp), None),
            Err(e) => {
                tracing::warn!(window = i, error = %e, "refinement window failed at backend");
                (WindowCorrection::rejected(i, window, RejectReason::BackendFailure), None, Some(e))
            }
        }
    });

    if let Some(err) = results.iter().map(|r| r.2.clone()).collect::<Option<Vec<_>>>().and_then(|errs| errs.into_iter().next()) {
        return Err(RefineError::AllWindowsFailed(err));
    }

    let corrections: Vec<WindowCorrection> = results.iter().map(|r| r.0.clone()).collect();
    let refined = apply_corrections(t_raw, &corrections)?;

    let windows = results
        .iter()
        .map(|(wc, resp, err)| WindowAudit {
            index: wc.window_index,
            correctable_ids: wc.correctable_ids.clone(),
            accepted: !wc.rejected,
            reject_reason: wc.reject_reason,
            retries: resp.as_ref().map_or(0, |r| r.retries),
            model_id: resp.as_ref().map(|r| r.model_id.clone()),
            error: err.as_ref().map(|e| e.to_string()),
        })
        .collect();
    let segments: Vec<SegmentAudit> = t_raw
        .segments
        .iter()
        .zip(&refined.segments)
        .map(|(r, f)| SegmentAudit { id: r.id.clone(), changed: r.text != f.text })
        .collect();
    let changed_segments = segments.iter().filter(|s| s.changed).count();
    Ok(RefineOutcome { transcript: refined, audit: RefineAudit { windows, segments, changed_segments } })
}
