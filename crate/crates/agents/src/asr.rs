//! ASR gateway: one wire contract for every speech backend, bounded retries,
//! and a fixture-driven mock that injects known errors.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

use i2e_core::metrics::ErrorCategory;
use i2e_core::{text, validate_against_session, AudioSession, Provenance, Segment, SpeakerRole, Transcript};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::limit::Semaphore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsrBackendConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the credential.
    pub auth_token_env: String,
    pub model_tag: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrent: usize,
}

fn default_backoff() -> u64 {
    500
}

fn default_concurrency() -> usize {
    4
}

impl Default for AsrBackendConfig {
    fn default() -> Self {
        AsrBackendConfig {
            endpoint_url: String::new(),
            auth_token_env: "I2E_ASR_TOKEN".into(),
            model_tag: "paraformer".into(),
            timeout_ms: 600_000,
            max_retries: 2,
            retry_backoff_ms: default_backoff(),
            max_concurrent: default_concurrency(),
        }
    }
}

impl AsrBackendConfig {
    pub fn validate(&self) -> Result<(), AsrError> {
        if self.timeout_ms == 0 {
            return Err(AsrError::InvalidConfig("timeout_ms must be positive".into()));
        }
        if self.max_concurrent == 0 {
            return Err(AsrError::InvalidConfig("max_concurrent must be positive".into()));
        }
        Ok(())
    }
}

/// The internal wire format every backend adapter produces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireSegment {
    pub speaker: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsrRequest {
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_uri: Option<String>,
    pub model_tag: String,
    /// Same for every attempt on a session, so a backend can deduplicate retries.
    pub idempotency_key: String,
}

impl AsrRequest {
    pub fn new(session: &AudioSession, model_tag: &str) -> Self {
        let mut h = Sha256::new();
        h.update(session.session_id.as_bytes());
        h.update([0]);
        h.update(session.audio_uri.as_deref().unwrap_or("").as_bytes());
        h.update([0]);
        h.update(model_tag.as_bytes());
        AsrRequest {
            session_id: session.session_id.clone(),
            audio_uri: session.audio_uri.clone(),
            model_tag: model_tag.to_owned(),
            idempotency_key: hex::encode(h.finalize()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsrReply {
    pub segments: Vec<WireSegment>,
    pub latency_ms: u64,
}

/// Failure of a single backend call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AsrCallError {
    /// Network, timeout or server-side failure; worth retrying.
    Transient(String),
    Auth(String),
    Malformed(String),
    AudioUnreadable(String),
}

pub trait AsrBackend: Send + Sync {
    fn name(&self) -> String;
    fn call(&self, req: &AsrRequest, cfg: &AsrBackendConfig) -> Result<AsrReply, AsrCallError>;
}

impl<T: AsrBackend + ?Sized> AsrBackend for std::sync::Arc<T> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn call(&self, req: &AsrRequest, cfg: &AsrBackendConfig) -> Result<AsrReply, AsrCallError> {
        (**self).call(req, cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsrResult {
    pub transcript: Transcript,
    /// As reported by the backend; zero for the mock.
    pub backend_latency_ms: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsrError {
    #[error("ASR backend unavailable after {attempts} attempts: {reason}")]
    BackendUnavailable { attempts: u32, reason: String },
    #[error("ASR authentication failed: {0}")]
    AuthFailure(String),
    #[error("ASR response cannot be mapped to segments: {0}")]
    MalformedBackendResponse(String),
    #[error("audio unreadable: {0}")]
    AudioUnreadable(String),
    #[error("invalid ASR configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid ASR fixture: {0}")]
    InvalidFixture(String),
}

/// Wraps a backend with the retry contract and a concurrency cap.
pub struct AsrGateway<B> {
    backend: B,
    cfg: AsrBackendConfig,
    attempts: AtomicU32,
    permits: Semaphore,
}

impl<B: AsrBackend> AsrGateway<B> {
    pub fn new(backend: B, cfg: AsrBackendConfig) -> Result<Self, AsrError> {
        cfg.validate()?;
        let permits = Semaphore::new(cfg.max_concurrent);
        Ok(AsrGateway { backend, cfg, attempts: AtomicU32::new(0), permits })
    }

    /// Backend calls made so far, retries included.
    pub fn attempts(&self) -> u32 {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn config(&self) -> &AsrBackendConfig {
        &self.cfg
    }

    pub fn transcribe(&self, session: &AudioSession) -> Result<AsrResult, AsrError> {
        let req = AsrRequest::new(session, &self.cfg.model_tag);
        let _permit = self.permits.acquire();
        let mut tries = 0;
        loop {
            tries += 1;
            self.attempts.fetch_add(1, Ordering::SeqCst);
            match self.backend.call(&req, &self.cfg) {
                Ok(reply) => {
                    let (transcript, warnings) =
                        wire_to_transcript(session, &reply.segments, &self.backend.name(), &self.cfg.model_tag)?;
                    return Ok(AsrResult { transcript, backend_latency_ms: reply.latency_ms, warnings });
                }
                Err(AsrCallError::Transient(reason)) => {
                    if tries > self.cfg.max_retries {
                        return Err(AsrError::BackendUnavailable { attempts: tries, reason });
                    }
                    tracing::warn!(attempt = tries, %reason, "ASR call failed, retrying");
                    std::thread::sleep(Duration::from_millis(self.cfg.retry_backoff_ms));
                }
                Err(AsrCallError::Auth(m)) => return Err(AsrError::AuthFailure(m)),
                Err(AsrCallError::Malformed(m)) => return Err(AsrError::MalformedBackendResponse(m)),
                Err(AsrCallError::AudioUnreadable(m)) => return Err(AsrError::AudioUnreadable(m)),
            }
        }
    }
}

pub const META_BACKEND: &str = "asr.backend";
pub const META_MODEL_TAG: &str = "asr.model_tag";

/// Maps wire segments to a validated raw transcript. Segments are ordered by
/// start time and numbered `seg-0001`, `seg-0002`, ...; speaker labels that
/// are neither teacher nor child become `unknown`.
pub fn wire_to_transcript(
    session: &AudioSession,
    wire: &[WireSegment],
    backend: &str,
    model_tag: &str,
) -> Result<(Transcript, Vec<String>), AsrError> {
    let mut warnings = Vec::new();
    let mut order: Vec<usize> = (0..wire.len()).collect();
    order.sort_by_key(|&i| (wire[i].start_ms, i));

    let mut segments = Vec::with_capacity(wire.len());
    for (k, &i) in order.iter().enumerate() {
        let w = &wire[i];
        let id = format!("seg-{:04}", k + 1);
        let speaker = SpeakerRole::from_label(&w.speaker);
        if speaker == SpeakerRole::Unknown && !w.speaker.eq_ignore_ascii_case("unknown") {
            warnings.push(format!("{id}: speaker label {:?} mapped to unknown", w.speaker));
        }
        if w.end_ms <= w.start_ms {
            return Err(AsrError::MalformedBackendResponse(format!(
                "segment {k} has end_ms {} not after start_ms {}",
                w.end_ms, w.start_ms
            )));
        }
        if w.text.trim().is_empty() {
            return Err(AsrError::MalformedBackendResponse(format!("segment {k} has empty text")));
        }
        segments.push(Segment::new(id, speaker, w.start_ms, w.end_ms, text::nfc(w.text.trim())));
    }

    let mut t = Transcript::new(session.session_id.clone(), Provenance::Raw, segments);
    t.source_meta.insert(META_BACKEND.into(), backend.to_owned());
    t.source_meta.insert(META_MODEL_TAG.into(), model_tag.to_owned());
    let violations = validate_against_session(&t, session);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(AsrError::MalformedBackendResponse(list.join("; ")));
    }
    Ok((t, warnings))
}

// ---------------------------------------------------------------------------
// Mock backend

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureUtterance {
    pub speaker: String,
    pub start_ms: u64,
    pub end_ms: u64,
    /// Gold text.
    pub text: String,
}

/// One injected recognition error. Character offsets index the utterance's
/// gold text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "category", rename_all = "snake_case")]
pub enum Injection {
    /// Replaces the first occurrence (at or after `at`) of `from` with the
    /// equally long `to`; the differing characters must be contiguous.
    Homophone {
        utterance: usize,
        #[serde(default)]
        at: usize,
        from: String,
        to: String,
    },
    ExtraWords { utterance: usize, at: usize, text: String },
    Omission { utterance: usize, at: usize, len: usize },
    /// Replaces `from` (zero or one punctuation mark at `at`) with `to`
    /// (zero or one punctuation mark).
    Punctuation {
        utterance: usize,
        at: usize,
        #[serde(default)]
        from: String,
        #[serde(default)]
        to: String,
    },
    SpeakerIdentification { utterance: usize, speaker: String },
    /// Splits the utterance in two at `at`, dividing its time span in proportion.
    Segmentation { utterance: usize, at: usize },
}

impl Injection {
    pub fn utterance(&self) -> usize {
        match *self {
            Injection::Homophone { utterance, .. }
            | Injection::ExtraWords { utterance, .. }
            | Injection::Omission { utterance, .. }
            | Injection::Punctuation { utterance, .. }
            | Injection::SpeakerIdentification { utterance, .. }
            | Injection::Segmentation { utterance, .. } => utterance,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Injection::Homophone { .. } => ErrorCategory::Homophone,
            Injection::ExtraWords { .. } => ErrorCategory::ExtraWords,
            Injection::Omission { .. } => ErrorCategory::Omission,
            Injection::Punctuation { .. } | Injection::Segmentation { .. } => ErrorCategory::PunctuationSegmentation,
            Injection::SpeakerIdentification { .. } => ErrorCategory::SpeakerIdentification,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsrFixture {
    pub session_id: String,
    pub duration_ms: u64,
    pub utterances: Vec<FixtureUtterance>,
    #[serde(default)]
    pub injections: Vec<Injection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub category: ErrorCategory,
    pub utterance: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockTranscription {
    pub result: AsrResult,
    pub manifest: Vec<ManifestEntry>,
    /// The fixture's gold text as a transcript with the same id scheme.
    pub gold: Transcript,
}

impl MockTranscription {
    pub fn manifest_counts(&self) -> BTreeMap<ErrorCategory, usize> {
        let mut out = BTreeMap::new();
        for e in &self.manifest {
            *out.entry(e.category).or_insert(0) += 1;
        }
        out
    }
}

fn bad(msg: impl Into<String>) -> AsrError {
    AsrError::InvalidFixture(msg.into())
}

/// A character-range text edit on one utterance.
struct TextEdit {
    start: usize,
    end: usize,
    insert: Vec<char>,
}

impl AsrFixture {
    pub fn session(&self) -> AudioSession {
        AudioSession {
            session_id: self.session_id.clone(),
            duration_ms: self.duration_ms,
            classroom_meta: Default::default(),
            audio_uri: None,
        }
    }

    pub fn gold_transcript(&self) -> Result<Transcript, AsrError> {
        let wire: Vec<WireSegment> = self
            .utterances
            .iter()
            .map(|u| WireSegment { speaker: u.speaker.clone(), start_ms: u.start_ms, end_ms: u.end_ms, text: u.text.clone() })
            .collect();
        let (mut t, _) = wire_to_transcript(&self.session(), &wire, "gold", "gold")
            .map_err(|e| bad(format!("gold utterances: {e}")))?;
        t.provenance = Provenance::Refined;
        Ok(t)
    }

    /// Applies the injections and returns the corrupted wire segments with the manifest.
    pub fn corrupt(&self) -> Result<(Vec<WireSegment>, Vec<ManifestEntry>), AsrError> {
        if self.duration_ms == 0 {
            return Err(bad("duration_ms must be positive"));
        }
        let n = self.utterances.len();
        let mut edits: Vec<Vec<TextEdit>> = (0..n).map(|_| Vec::new()).collect();
        let mut speakers: Vec<String> = self.utterances.iter().map(|u| u.speaker.clone()).collect();
        let mut splits: Vec<Option<usize>> = vec![None; n];
        let mut manifest = Vec::new();

        for (k, inj) in self.injections.iter().enumerate() {
            let u = inj.utterance();
            let utt = self.utterances.get(u).ok_or_else(|| bad(format!("injection {k}: no utterance {u}")))?;
            let gold: Vec<char> = utt.text.chars().collect();
            let at_ok = |at: usize| if at <= gold.len() { Ok(()) } else { Err(bad(format!("injection {k}: offset {at} past end"))) };
            let detail = match inj {
                Injection::Homophone { at, from, to, .. } => {
                    let (f, t): (Vec<char>, Vec<char>) = (from.chars().collect(), to.chars().collect());
                    if f.is_empty() || f.len() != t.len() || f == t {
                        return Err(bad(format!("injection {k}: homophone needs equally long, different words")));
                    }
                    let diff: Vec<usize> = (0..f.len()).filter(|&i| f[i] != t[i]).collect();
                    if diff.last().unwrap() - diff[0] + 1 != diff.len() {
                        return Err(bad(format!("injection {k}: homophone differences must be contiguous")));
                    }
                    at_ok(*at)?;
                    let pos = (*at..=gold.len().saturating_sub(f.len()))
                        .find(|&p| gold[p..].starts_with(&f))
                        .ok_or_else(|| bad(format!("injection {k}: {from:?} not found in utterance {u}")))?;
                    edits[u].push(TextEdit { start: pos + diff[0], end: pos + diff[0] + diff.len(), insert: t[diff[0]..=*diff.last().unwrap()].to_vec() });
                    format!("{from} -> {to}")
                }
                Injection::ExtraWords { at, text: extra, .. } => {
                    at_ok(*at)?;
                    let ins: Vec<char> = extra.chars().collect();
                    if text::scoring_chars(extra).is_empty() {
                        return Err(bad(format!("injection {k}: extra words must contain scoring characters")));
                    }
                    edits[u].push(TextEdit { start: *at, end: *at, insert: ins });
                    format!("+{extra}")
                }
                Injection::Omission { at, len, .. } => {
                    at_ok(at + len)?;
                    let dropped: String = gold[*at..at + len].iter().collect();
                    if *len == 0 || dropped.chars().any(|c| text::is_punctuation(c) || c.is_whitespace()) {
                        return Err(bad(format!("injection {k}: omission must drop at least one non-punctuation character and nothing else")));
                    }
                    edits[u].push(TextEdit { start: *at, end: at + len, insert: Vec::new() });
                    format!("-{dropped}")
                }
                Injection::Punctuation { at, from, to, .. } => {
                    let (f, t): (Vec<char>, Vec<char>) = (from.chars().collect(), to.chars().collect());
                    let one_mark = |v: &[char]| v.len() <= 1 && v.iter().all(|&c| text::is_punctuation(c));
                    if !one_mark(&f) || !one_mark(&t) || f == t {
                        return Err(bad(format!("injection {k}: punctuation edits swap, add or drop one mark")));
                    }
                    at_ok(at + f.len())?;
                    if gold[*at..at + f.len()] != f[..] {
                        return Err(bad(format!("injection {k}: {from:?} not at offset {at}")));
                    }
                    edits[u].push(TextEdit { start: *at, end: at + f.len(), insert: t });
                    format!("{from:?} -> {to:?}")
                }
                Injection::SpeakerIdentification { speaker, .. } => {
                    if SpeakerRole::from_label(speaker) == SpeakerRole::from_label(&utt.speaker) {
                        return Err(bad(format!("injection {k}: speaker flip must change the role")));
                    }
                    speakers[u] = speaker.clone();
                    format!("{} -> {speaker}", utt.speaker)
                }
                Injection::Segmentation { at, .. } => {
                    let (l, r): (String, String) = (gold[..*at.min(&gold.len())].iter().collect(), gold[(*at).min(gold.len())..].iter().collect());
                    if text::scoring_chars(&l).is_empty() || text::scoring_chars(&r).is_empty() {
                        return Err(bad(format!("injection {k}: split must leave text on both sides")));
                    }
                    if splits[u].replace(*at).is_some() {
                        return Err(bad(format!("injection {k}: utterance {u} is already split")));
                    }
                    format!("split at {at}")
                }
            };
            manifest.push(ManifestEntry { category: inj.category(), utterance: u, detail });
        }

        let mut wire = Vec::new();
        for (u, utt) in self.utterances.iter().enumerate() {
            let es = &mut edits[u];
            if splits[u].is_some() && !es.is_empty() {
                return Err(bad(format!("utterance {u}: a split cannot be combined with text edits")));
            }
            es.sort_by_key(|e| (e.start, e.end));
            for pair in es.windows(2) {
                // Touching edits would merge into one event.
                if pair[1].start <= pair[0].end {
                    return Err(bad(format!("utterance {u}: injected edits overlap or touch")));
                }
            }
            let mut chars: Vec<char> = utt.text.chars().collect();
            for e in es.iter().rev() {
                chars.splice(e.start..e.end, e.insert.iter().copied());
            }
            let corrupted: String = chars.into_iter().collect();
            if text::scoring_chars(&corrupted).is_empty() {
                return Err(bad(format!("utterance {u}: injections leave no text")));
            }
            match splits[u] {
                None => wire.push(WireSegment { speaker: speakers[u].clone(), start_ms: utt.start_ms, end_ms: utt.end_ms, text: corrupted }),
                Some(at) => {
                    let total = utt.text.chars().count() as u64;
                    let span = utt.end_ms - utt.start_ms;
                    let mid = utt.start_ms + span * at as u64 / total;
                    if mid <= utt.start_ms || mid >= utt.end_ms {
                        return Err(bad(format!("utterance {u}: too short to split")));
                    }
                    let g: Vec<char> = utt.text.chars().collect();
                    wire.push(WireSegment { speaker: speakers[u].clone(), start_ms: utt.start_ms, end_ms: mid, text: g[..at].iter().collect() });
                    wire.push(WireSegment { speaker: speakers[u].clone(), start_ms: mid, end_ms: utt.end_ms, text: g[at..].iter().collect() });
                }
            }
        }
        Ok((wire, manifest))
    }
}

pub const MOCK_BACKEND_NAME: &str = "mock";

/// Deterministic transcription of a fixture: corrupted transcript, manifest and gold.
pub fn mock_transcribe(fixture: &AsrFixture) -> Result<MockTranscription, AsrError> {
    let gold = fixture.gold_transcript()?;
    let (wire, manifest) = fixture.corrupt()?;
    let (transcript, warnings) = wire_to_transcript(&fixture.session(), &wire, MOCK_BACKEND_NAME, "mock")
        .map_err(|e| bad(format!("corrupted output: {e}")))?;
    Ok(MockTranscription { result: AsrResult { transcript, backend_latency_ms: 0, warnings }, manifest, gold })
}

/// Serves fixtures by session id, optionally failing the first calls.
#[derive(Default)]
pub struct MockAsr {
    fixtures: BTreeMap<String, AsrFixture>,
    fail_first: AtomicU32,
}

impl MockAsr {
    pub fn new(fixtures: impl IntoIterator<Item = AsrFixture>) -> Self {
        MockAsr { fixtures: fixtures.into_iter().map(|f| (f.session_id.clone(), f)).collect(), fail_first: AtomicU32::new(0) }
    }

    /// The next `n` calls fail transiently.
    pub fn failing_first(self, n: u32) -> Self {
        self.fail_first.store(n, Ordering::SeqCst);
        self
    }
}

impl AsrBackend for MockAsr {
    fn name(&self) -> String {
        MOCK_BACKEND_NAME.into()
    }

    fn call(&self, req: &AsrRequest, _cfg: &AsrBackendConfig) -> Result<AsrReply, AsrCallError> {
        if self.fail_first.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok() {
            return Err(AsrCallError::Transient("scripted failure".into()));
        }
        let fixture = self
            .fixtures
            .get(&req.session_id)
            .ok_or_else(|| AsrCallError::AudioUnreadable(format!("no mock audio for session {}", req.session_id)))?;
        let (segments, _) = fixture.corrupt().map_err(|e| AsrCallError::Malformed(e.to_string()))?;
        Ok(AsrReply { segments, latency_ms: 0 })
    }
}

/// Mock backend for offline runs: the session's audio file is itself an
/// [`AsrFixture`] document, transcribed with its injected errors.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixtureFileAsr;

impl AsrBackend for FixtureFileAsr {
    fn name(&self) -> String {
        MOCK_BACKEND_NAME.into()
    }

    fn call(&self, req: &AsrRequest, _cfg: &AsrBackendConfig) -> Result<AsrReply, AsrCallError> {
        let uri = req.audio_uri.as_deref().ok_or_else(|| AsrCallError::AudioUnreadable("session has no audio_uri".into()))?;
        let path = uri.strip_prefix("file://").unwrap_or(uri);
        let bytes = std::fs::read(path).map_err(|e| AsrCallError::AudioUnreadable(format!("{path}: {e}")))?;
        let fixture: AsrFixture = i2e_core::parse(&bytes).map_err(|e| AsrCallError::AudioUnreadable(format!("{path}: {e}")))?;
        let (segments, _) = fixture.corrupt().map_err(|e| AsrCallError::AudioUnreadable(e.to_string()))?;
        Ok(AsrReply { segments, latency_ms: 0 })
    }
}
