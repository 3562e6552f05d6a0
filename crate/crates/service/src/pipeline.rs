//! Staged, resumable execution of one session: transcribe → refine →
//! evaluate → score. Every stage writes its artifact before the job moves
//! on, and a stage whose artifact already exists is skipped, so a run that
//! dies between stages resumes where it stopped.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, TryLockError};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use i2e_agents::asr::{AsrBackend, AsrBackendConfig, AsrGateway};
use i2e_agents::eval::{evaluate_session, EvalParams};
use i2e_agents::llm::LlmBackend;
use i2e_agents::refine::{refine, RefineAudit, RefineParams};
use i2e_core::metrics::{agreement, AgreementError, AgreementReport, Grouping};
use i2e_core::{
    parse, resolve_judgments, score_judgments, validate_against_session, validate_transcript, AudioSession,
    ExpertAnnotation, HomophoneLexicon, IndicatorJudgment, Meta, Provenance, Rubric, Scale, ScaleSummary, Transcript,
    Validation,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::report::{build_report, Report, ScaleInput};
use crate::state::{JobRecord, JobState, Progress, RunOptions, Stage, StageTiming};
use crate::store::{
    judgments_name, rubric_snapshot_name, summary_name, valid_session_id, IdempotencyEntry, InputKind, SessionMeta,
    Store, StoreError, RAW_TRANSCRIPT, REFINED_TRANSCRIPT, REFINE_AUDIT, REPORT,
};

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Everything the stages call out to.
pub struct Backends {
    pub asr: Arc<dyn AsrBackend>,
    pub asr_config: AsrBackendConfig,
    pub llm: Arc<dyn LlmBackend>,
    pub lexicon: HomophoneLexicon,
    pub refine: RefineParams,
    pub eval: EvalParams,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{message}")]
    Malformed { message: String, path: Option<String> },
    #[error("{0}")]
    Unprocessable(String),
    #[error("indicator keys do not match: {0}")]
    KeyMismatch(AgreementError),
    #[error(transparent)]
    Store(StoreError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<StoreError> for PipelineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => PipelineError::NotFound(id),
            e => PipelineError::Store(e),
        }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub enum UploadPayload {
    Transcript(Vec<u8>),
    Audio { bytes: Vec<u8>, extension: String },
}

#[derive(Debug, Clone)]
pub struct Upload {
    pub session_id: Option<String>,
    pub idempotency_key: Option<String>,
    pub classroom_meta: Meta,
    pub duration_ms: Option<u64>,
    pub payload: UploadPayload,
}

impl Upload {
    fn payload_hash(&self) -> String {
        let mut h = Sha256::new();
        match &self.payload {
            UploadPayload::Transcript(b) => {
                h.update(b"transcript\0");
                h.update(b);
            }
            UploadPayload::Audio { bytes, extension } => {
                h.update(b"audio\0");
                h.update(extension.as_bytes());
                h.update([0]);
                h.update(bytes);
            }
        }
        h.update([0]);
        h.update(serde_json::to_vec(&self.classroom_meta).unwrap_or_default());
        h.update([0]);
        h.update(self.session_id.as_deref().unwrap_or("").as_bytes());
        h.update([0]);
        h.update(self.duration_ms.map(|d| d.to_string()).unwrap_or_default().as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadOutcome {
    pub session_id: String,
    /// False when an idempotent replay returned an existing session.
    pub created: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrideRequest {
    pub new_observed: bool,
    #[serde(default)]
    pub expert_id: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrideRecord {
    pub indicator_id: String,
    pub scale: Scale,
    pub new_observed: bool,
    pub expert_id: String,
    #[serde(default)]
    pub note: Option<String>,
    pub timestamp_ms: u64,
    pub prior_observed: bool,
    pub prior_validation: Validation,
}

/// Folds overrides onto model judgments; the last override of an indicator wins.
pub fn effective_judgments(judgments: &[IndicatorJudgment], overrides: &[OverrideRecord]) -> Vec<IndicatorJudgment> {
    let mut out = judgments.to_vec();
    for o in overrides {
        if let Some(j) = out.iter_mut().find(|j| j.indicator_id == o.indicator_id) {
            j.observed = o.new_observed;
            j.validation = Validation::Overridden;
            j.overridden_by = Some(o.expert_id.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusView {
    pub session_id: String,
    #[serde(flatten)]
    pub state: JobState,
    pub progress: Progress,
    pub retry_count: BTreeMap<Stage, u32>,
    pub timings: BTreeMap<Stage, StageTiming>,
    pub transitions: Vec<crate::state::Transition>,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub sessions_total: usize,
    pub sessions_succeeded: usize,
    pub success_rate: Option<f64>,
    pub mean_stage_minutes: BTreeMap<Stage, f64>,
}

#[derive(Debug, Clone, Serialize)]
struct AuditEvent<'a> {
    at_ms: u64,
    event: &'a str,
    #[serde(flatten)]
    detail: serde_json::Value,
}

fn check_overrides(options: &RunOptions) -> Result<()> {
    let bad = |m: &str| Err(PipelineError::Unprocessable(m.to_owned()));
    if let Some(r) = &options.refine {
        let w = r.window;
        if r.concurrency == 0 || w.window_size == 0 || w.token_budget == 0 {
            return bad("refine concurrency, window_size and token_budget must be positive");
        }
    }
    if let Some(e) = &options.eval {
        if e.concurrency == 0 || e.token_budget == 0 {
            return bad("eval concurrency and token_budget must be positive");
        }
    }
    Ok(())
}

pub struct Pipeline {
    store: Store,
    asr: AsrGateway<Arc<dyn AsrBackend>>,
    llm: Arc<dyn LlmBackend>,
    lexicon: HomophoneLexicon,
    refine: RefineParams,
    eval: EvalParams,
    progress: Mutex<HashMap<String, Progress>>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    uploads: Mutex<()>,
}

impl Pipeline {
    pub fn new(store: Store, backends: Backends) -> Result<Self> {
        let asr = AsrGateway::new(backends.asr, backends.asr_config).map_err(|e| PipelineError::Internal(e.to_string()))?;
        Ok(Pipeline {
            store,
            asr,
            llm: backends.llm,
            lexicon: backends.lexicon,
            refine: backends.refine,
            eval: backends.eval,
            progress: Mutex::default(),
            locks: Mutex::default(),
            uploads: Mutex::default(),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().unwrap().entry(id.to_owned()).or_default().clone()
    }

    fn audit(&self, id: &str, event: &str, detail: serde_json::Value) -> Result<()> {
        self.store.append_line(id, "audit.jsonl", &AuditEvent { at_ms: now_ms(), event, detail })?;
        Ok(())
    }

    // -- upload ---------------------------------------------------------------

    pub fn create_session(&self, upload: Upload) -> Result<UploadOutcome> {
        let _serial = self.uploads.lock().unwrap();
        let hash = upload.payload_hash();
        if let Some(key) = &upload.idempotency_key {
            if let Some(entry) = self.store.idempotency(key)? {
                if entry.payload_hash == hash {
                    return Ok(UploadOutcome { session_id: entry.session_id, created: false });
                }
                return Err(PipelineError::Conflict(format!(
                    "idempotency key already used for session {} with a different payload",
                    entry.session_id
                )));
            }
        }

        let malformed = |message: String, path: Option<String>| PipelineError::Malformed { message, path };
        let transcript = match &upload.payload {
            UploadPayload::Transcript(bytes) => {
                let t: Transcript = parse(bytes).map_err(|e| malformed(e.message.clone(), Some(e.path.clone())))?;
                if t.provenance != Provenance::Raw {
                    return Err(malformed("uploaded transcripts must have provenance \"raw\"".into(), Some("provenance".into())));
                }
                let violations = validate_transcript(&t, None);
                if !violations.is_empty() {
                    let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                    return Err(malformed(format!("invalid transcript: {}", list.join("; ")), Some("segments".into())));
                }
                Some(t)
            }
            UploadPayload::Audio { .. } => None,
        };

        let session_id = match (&upload.session_id, &transcript) {
            (Some(id), Some(t)) if *id != t.session_id => {
                return Err(malformed(
                    format!("session_id {id} differs from the transcript's {}", t.session_id),
                    Some("session_id".into()),
                ))
            }
            (Some(id), _) => id.clone(),
            (None, Some(t)) => t.session_id.clone(),
            (None, None) => uuid::Uuid::new_v4().to_string(),
        };
        if !valid_session_id(&session_id) {
            return Err(malformed(format!("session id {session_id:?} must use [A-Za-z0-9._-]"), Some("session_id".into())));
        }
        if self.store.exists(&session_id) {
            return Err(PipelineError::Conflict(format!("session {session_id} already exists")));
        }

        let duration_ms = match (&transcript, upload.duration_ms) {
            (_, Some(d)) => d,
            (Some(t), None) => t.max_end_ms().unwrap_or(0),
            (None, None) => return Err(malformed("audio uploads need duration_ms".into(), Some("duration_ms".into()))),
        };
        if duration_ms == 0 {
            return Err(malformed("duration_ms must be positive".into(), Some("duration_ms".into())));
        }
        let mut session = AudioSession { session_id: session_id.clone(), duration_ms, classroom_meta: upload.classroom_meta.clone(), audio_uri: None };

        std::fs::create_dir_all(self.store.session_dir(&session_id))
            .map_err(|e| PipelineError::Internal(e.to_string()))?;
        let input = match (&upload.payload, &transcript) {
            (_, Some(t)) => {
                let violations = validate_against_session(t, &session);
                if !violations.is_empty() {
                    let _ = std::fs::remove_dir_all(self.store.session_dir(&session_id));
                    let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                    return Err(malformed(list.join("; "), Some("duration_ms".into())));
                }
                self.store.put_artifact(&session_id, RAW_TRANSCRIPT, t)?;
                InputKind::Transcript
            }
            (UploadPayload::Audio { bytes, extension }, None) => {
                // relative to the session directory so the data root can move
                let name = format!("audio.{extension}");
                self.store.write_blob(&session_id, &name, bytes)?;
                session.audio_uri = Some(name);
                InputKind::Audio
            }
            (UploadPayload::Transcript(_), None) => unreachable!(),
        };

        let meta = SessionMeta { session, input, payload_hash: hash.clone(), idempotency_key: upload.idempotency_key.clone() };
        self.store.create_session(&meta, &JobRecord::new(now_ms()))?;
        if let Some(key) = &upload.idempotency_key {
            self.store.put_idempotency(key, &IdempotencyEntry { session_id: session_id.clone(), payload_hash: hash })?;
        }
        self.audit(&session_id, "created", serde_json::json!({"input": input}))?;
        Ok(UploadOutcome { session_id, created: true })
    }

    // -- run --------------------------------------------------------------------

    /// Moves a Created or Failed session into its next working stage and
    /// marks it queued. The caller hands the id to a worker.
    pub fn request_run(&self, id: &str, options: RunOptions) -> Result<JobState> {
        let lock = self.lock_for(id);
        let _guard = match lock.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(PipelineError::Conflict(format!("session {id} is running"))),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let mut job = self.store.job(id)?;
        let now = now_ms();
        match job.state.clone() {
            JobState::Created => {
                let scales = if options.scales.is_empty() {
                    self.store.rubrics()?.iter().map(|r| r.scale).collect()
                } else {
                    options.scales.clone()
                };
                if scales.is_empty() {
                    return Err(PipelineError::Unprocessable("no rubric available; PUT /rubrics/{scale} first".into()));
                }
                if options.skip_asr && !self.store.has_artifact(id, RAW_TRANSCRIPT) {
                    return Err(PipelineError::Unprocessable("skip_asr needs an uploaded transcript".into()));
                }
                check_overrides(&options)?;
                let mut rubrics = Vec::new();
                for scale in &scales {
                    rubrics.push(
                        self.store
                            .rubric(*scale)?
                            .ok_or_else(|| PipelineError::Unprocessable(format!("no rubric stored for {scale}")))?,
                    );
                }
                for rubric in &rubrics {
                    self.store.put_artifact(id, &rubric_snapshot_name(rubric.scale), rubric)?;
                }
                job.options = RunOptions { scales, ..options };
                job.transition(JobState::Transcribing, now).map_err(|e| PipelineError::Internal(e.to_string()))?;
            }
            JobState::Failed { stage, .. } => {
                *job.retry_count.entry(stage).or_insert(0) += 1;
                job.transition(JobState::of_stage(stage), now).map_err(|e| PipelineError::Internal(e.to_string()))?;
            }
            JobState::Done => return Err(PipelineError::Conflict(format!("session {id} is already done"))),
            s => return Err(PipelineError::Conflict(format!("session {id} is already running ({})", s.label()))),
        }
        self.store.put_job(id, &job)?;
        self.store.enqueue(id)?;
        self.audit(id, "run_requested", serde_json::json!({"state": job.state.label()}))?;
        Ok(job.state)
    }

    /// Runs every remaining stage.
    pub fn execute(&self, id: &str) -> Result<JobState> {
        self.execute_until(id, None)
    }

    /// Runs stages until the job is terminal, or stops right after
    /// `halt_after` completes, leaving the job as a crashed worker would.
    pub fn execute_until(&self, id: &str, halt_after: Option<Stage>) -> Result<JobState> {
        let lock = self.lock_for(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            let mut job = self.store.job(id)?;
            let Some(stage) = job.state.stage() else {
                self.store.dequeue(id)?;
                self.progress.lock().unwrap().remove(id);
                return Ok(job.state);
            };
            let started_ms = now_ms();
            let clock = Instant::now();
            let outcome = self.run_stage(id, stage, &mut job);
            let work_ms = clock.elapsed().as_millis() as u64;
            let finished_ms = now_ms();
            let next = match outcome {
                Ok(skipped) => {
                    if !skipped || !job.timings.contains_key(&stage) {
                        let work_ms = if skipped { 0 } else { work_ms };
                        job.timings.insert(stage, StageTiming { started_ms, finished_ms, work_ms, skipped });
                    }
                    stage.next()
                }
                Err(reason) => {
                    tracing::warn!(session = id, %stage, %reason, "stage failed");
                    JobState::Failed { stage, reason }
                }
            };
            job.transition(next, finished_ms).map_err(|e| PipelineError::Internal(e.to_string()))?;
            self.store.put_job(id, &job)?;
            self.audit(id, "transition", serde_json::json!({"stage": stage, "to": job.state.label()}))?;
            if halt_after == Some(stage) && job.state.is_running() {
                return Ok(job.state);
            }
        }
    }

    /// Sessions left mid-pipeline by a previous process.
    pub fn recover(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for id in self.store.list_sessions()? {
            if self.store.job(&id)?.state.is_running() {
                ids.push(id);
            }
        }
        Ok(ids)
    }

    fn run_stage(&self, id: &str, stage: Stage, job: &mut JobRecord) -> std::result::Result<bool, String> {
        let s = |e: StoreError| e.to_string();
        match stage {
            Stage::Transcribing => {
                if self.store.has_artifact(id, RAW_TRANSCRIPT) {
                    return Ok(true);
                }
                let mut session = self.store.meta(id).map_err(s)?.session;
                if let Some(uri) = &session.audio_uri {
                    let path = self.store.session_dir(id).join(uri);
                    session.audio_uri = Some(path.to_string_lossy().into_owned());
                }
                let result = self.asr.transcribe(&session).map_err(|e| e.to_string())?;
                for w in &result.warnings {
                    let _ = self.audit(id, "asr_warning", serde_json::json!({"message": w}));
                }
                self.store.put_artifact(id, RAW_TRANSCRIPT, &result.transcript).map_err(s)?;
                Ok(false)
            }
            Stage::Refining => {
                if self.store.has_artifact(id, REFINED_TRANSCRIPT) && self.store.has_artifact(id, REFINE_AUDIT) {
                    return Ok(true);
                }
                let raw: Transcript = self.store.artifact(id, RAW_TRANSCRIPT).map_err(s)?.ok_or("raw transcript missing")?;
                let params = job.options.refine.unwrap_or(self.refine);
                let out = refine(&raw, &self.lexicon, &self.llm, params).map_err(|e| e.to_string())?;
                self.store.put_artifact(id, REFINE_AUDIT, &out.audit).map_err(s)?;
                self.store.put_artifact(id, REFINED_TRANSCRIPT, &out.transcript).map_err(s)?;
                Ok(false)
            }
            Stage::Evaluating => {
                let refined: Transcript =
                    self.store.artifact(id, REFINED_TRANSCRIPT).map_err(s)?.ok_or("refined transcript missing")?;
                let rubrics = self.snapshots(id, &job.options.scales).map_err(|e| e.to_string())?;
                let params = job.options.eval.as_ref().unwrap_or(&self.eval);
                let total: usize = rubrics.iter().map(|r| r.accessible_indicators().count()).sum();
                let mut done = 0;
                let mut skipped = true;
                for rubric in &rubrics {
                    let name = judgments_name(rubric.scale);
                    let n = rubric.accessible_indicators().count();
                    if self.store.has_artifact(id, &name) {
                        done += n;
                        continue;
                    }
                    skipped = false;
                    let base = done;
                    let report = |d: usize, _n: usize| {
                        let mut p = self.progress.lock().unwrap();
                        let entry = p.entry(id.to_owned()).or_default();
                        entry.indicators_total = total;
                        entry.indicators_done = base + d;
                    };
                    report(0, n);
                    let judgments = evaluate_session(rubric, &refined, &self.llm, params, &report).map_err(|e| e.to_string())?;
                    self.store.put_artifact(id, &name, &judgments).map_err(s)?;
                    done += n;
                }
                job.progress = Progress { indicators_total: total, indicators_done: done, indicators_flagged: 0 };
                job.progress.indicators_flagged = self.flagged_count(id, &rubrics).map_err(|e| e.to_string())?;
                Ok(skipped)
            }
            Stage::Scoring => {
                let report = self.rescore(id, &job.options.scales).map_err(|e| e.to_string())?;
                job.progress = Progress {
                    indicators_total: report.indicators_total,
                    indicators_done: report.indicators_total,
                    indicators_flagged: report.indicators_flagged,
                };
                Ok(false)
            }
        }
    }

    fn snapshots(&self, id: &str, scales: &[Scale]) -> Result<Vec<Rubric>> {
        scales
            .iter()
            .map(|scale| {
                self.store
                    .artifact::<Rubric>(id, &rubric_snapshot_name(*scale))?
                    .ok_or_else(|| PipelineError::Internal(format!("rubric snapshot for {scale} missing")))
            })
            .collect()
    }

    fn flagged_count(&self, id: &str, rubrics: &[Rubric]) -> Result<usize> {
        let overrides = self.overrides(id)?;
        let mut n = 0;
        for r in rubrics {
            let js = self.judgments(id, r.scale)?.unwrap_or_default();
            n += effective_judgments(&js, &overrides).iter().filter(|j| j.validation.is_flagged()).count();
        }
        Ok(n)
    }

    pub fn judgments(&self, id: &str, scale: Scale) -> Result<Option<Vec<IndicatorJudgment>>> {
        Ok(self.store.artifact(id, &judgments_name(scale))?)
    }

    pub fn overrides(&self, id: &str) -> Result<Vec<OverrideRecord>> {
        Ok(self.store.read_lines(id, "overrides.jsonl")?)
    }

    /// Recomputes scale summaries and the report from judgments plus overrides.
    pub fn rescore(&self, id: &str, scales: &[Scale]) -> Result<Report> {
        let refined: Transcript = self
            .store
            .artifact(id, REFINED_TRANSCRIPT)?
            .ok_or_else(|| PipelineError::Internal("refined transcript missing".into()))?;
        let rubrics = self.snapshots(id, scales)?;
        let overrides = self.overrides(id)?;
        let mut scored: Vec<(Rubric, Vec<IndicatorJudgment>, ScaleSummary)> = Vec::new();
        for rubric in rubrics {
            let js = self
                .judgments(id, rubric.scale)?
                .ok_or_else(|| PipelineError::Internal(format!("judgments for {} missing", rubric.scale)))?;
            let effective = effective_judgments(&js, &overrides);
            let summary = score_judgments(&rubric, &effective).map_err(|e| PipelineError::Internal(e.to_string()))?;
            self.store.put_artifact(id, &summary_name(rubric.scale), &summary)?;
            scored.push((rubric, effective, summary));
        }
        let inputs: Vec<ScaleInput<'_>> =
            scored.iter().map(|(rubric, judgments, summary)| ScaleInput { rubric, judgments, summary }).collect();
        let report = build_report(id, &refined, &inputs);
        self.store.put_artifact(id, REPORT, &report)?;
        Ok(report)
    }

    // -- queries -----------------------------------------------------------------

    pub fn status(&self, id: &str) -> Result<StatusView> {
        let job = self.store.job(id)?;
        let live = self.progress.lock().unwrap().get(id).cloned();
        let progress = match (&job.state, live) {
            (JobState::Evaluating, Some(p)) => p,
            _ => job.progress.clone(),
        };
        let mut artifacts = Vec::new();
        let mut names = vec![RAW_TRANSCRIPT.to_owned(), REFINED_TRANSCRIPT.to_owned(), REFINE_AUDIT.to_owned()];
        for scale in &job.options.scales {
            names.push(judgments_name(*scale));
            names.push(summary_name(*scale));
        }
        names.push(REPORT.to_owned());
        for n in names {
            if self.store.has_artifact(id, &n) {
                artifacts.push(n);
            }
        }
        Ok(StatusView {
            session_id: id.to_owned(),
            state: job.state,
            progress,
            retry_count: job.retry_count,
            timings: job.timings,
            transitions: job.transitions,
            artifacts,
        })
    }

    /// The stored report, or Conflict while scoring has not completed.
    pub fn report(&self, id: &str) -> Result<(Report, JobRecord)> {
        let job = self.store.job(id)?;
        let ready = matches!(job.state, JobState::Done) && self.store.has_artifact(id, REPORT);
        if !ready {
            return Err(PipelineError::Conflict(format!("report not ready (state {})", job.state.label())));
        }
        let report = self.store.artifact(id, REPORT)?.ok_or_else(|| PipelineError::Internal("report missing".into()))?;
        Ok((report, job))
    }

    pub fn apply_override(&self, id: &str, indicator_id: &str, req: OverrideRequest) -> Result<IndicatorJudgment> {
        let job = self.store.job(id)?;
        let expert_id = req
            .expert_id
            .as_deref()
            .map(str::trim)
            .filter(|e| !e.is_empty())
            .ok_or_else(|| PipelineError::Unprocessable("expert_id is required".into()))?
            .to_owned();
        let lock = self.lock_for(id);
        let _guard = match lock.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(PipelineError::Conflict(format!("session {id} is running"))),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        if job.state != JobState::Done {
            return Err(PipelineError::Conflict(format!("session {id} is not done (state {})", job.state.label())));
        }
        let overrides = self.overrides(id)?;
        let mut found = None;
        for scale in &job.options.scales {
            let js = self.judgments(id, *scale)?.unwrap_or_default();
            if let Some(j) = effective_judgments(&js, &overrides).into_iter().find(|j| j.indicator_id == indicator_id) {
                found = Some((*scale, j));
                break;
            }
        }
        let (scale, prior) = found.ok_or_else(|| PipelineError::NotFound(format!("{id}/{indicator_id}")))?;
        let record = OverrideRecord {
            indicator_id: indicator_id.to_owned(),
            scale,
            new_observed: req.new_observed,
            expert_id,
            note: req.note,
            timestamp_ms: now_ms(),
            prior_observed: prior.observed,
            prior_validation: prior.validation,
        };
        self.store.append_line(id, "overrides.jsonl", &record)?;
        self.audit(id, "override", serde_json::to_value(&record).unwrap_or_default())?;
        let report = self.rescore(id, &job.options.scales)?;

        let mut job = self.store.job(id)?;
        job.progress.indicators_flagged = report.indicators_flagged;
        self.store.put_job(id, &job)?;

        let js = self.judgments(id, scale)?.unwrap_or_default();
        let all = self.overrides(id)?;
        effective_judgments(&js, &all)
            .into_iter()
            .find(|j| j.indicator_id == indicator_id)
            .ok_or_else(|| PipelineError::Internal("judgment vanished".into()))
    }

    pub fn agreement(&self, id: &str, annotation: &ExpertAnnotation, grouping: Grouping) -> Result<AgreementReport> {
        let job = self.store.job(id)?;
        if job.state != JobState::Done {
            return Err(PipelineError::Conflict(format!("session {id} is not done (state {})", job.state.label())));
        }
        if !job.options.scales.contains(&annotation.scale) {
            return Err(PipelineError::Unprocessable(format!("session {id} has no {} judgments", annotation.scale)));
        }
        let rubric = self.snapshots(id, &[annotation.scale])?.remove(0);
        let js = self.judgments(id, annotation.scale)?.unwrap_or_default();
        let resolved = resolve_judgments(&rubric, &effective_judgments(&js, &self.overrides(id)?));
        agreement(&resolved.values, annotation, &rubric, grouping).map_err(|e| match e {
            e @ AgreementError::KeyMismatch { .. } => PipelineError::KeyMismatch(e),
            e => PipelineError::Unprocessable(e.to_string()),
        })
    }

    pub fn stats(&self) -> Result<Stats> {
        let mut total = 0;
        let mut succeeded = 0;
        let mut minutes: BTreeMap<Stage, Vec<f64>> = BTreeMap::new();
        for id in self.store.list_sessions()? {
            let job = self.store.job(&id)?;
            if job.state == JobState::Created {
                continue;
            }
            total += 1;
            if job.state == JobState::Done && job.total_retries() == 0 {
                succeeded += 1;
            }
            for (stage, t) in &job.timings {
                if !t.skipped {
                    minutes.entry(*stage).or_default().push(t.work_ms as f64 / 60_000.0);
                }
            }
        }
        Ok(Stats {
            sessions_total: total,
            sessions_succeeded: succeeded,
            success_rate: (total > 0).then(|| succeeded as f64 / total as f64),
            mean_stage_minutes: minutes
                .into_iter()
                .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
                .collect(),
        })
    }

    pub fn refine_audit(&self, id: &str) -> Result<Option<RefineAudit>> {
        Ok(self.store.artifact(id, REFINE_AUDIT)?)
    }
}
