#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use i2e_agents::asr::{AsrBackendConfig, FixtureFileAsr};
use i2e_agents::eval::EvalParams;
use i2e_agents::llm::{Completion, LlmBackend, LlmError, LlmRequest, ResponseSchema, Usage};
use i2e_agents::mock::DeterministicMock;
use i2e_agents::refine::RefineParams;
use i2e_core::{load_rubric, HomophoneLexicon, Rubric};
use i2e_service::api::{router, start_workers, AppState};
use i2e_service::pipeline::{Backends, Pipeline, Upload, UploadPayload};
use i2e_service::store::Store;

pub fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/demo")
}

pub fn demo_bytes(name: &str) -> Vec<u8> {
    std::fs::read(demo_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn demo_rubrics() -> Vec<Rubric> {
    ["rubric_sstew.json", "rubric_ecqrs.json"].iter().map(|n| load_rubric(&demo_bytes(n)).unwrap()).collect()
}

pub fn demo_lexicon() -> HomophoneLexicon {
    HomophoneLexicon::load(&demo_bytes("lexicon.json")).unwrap()
}

pub fn backends_with(llm: Arc<dyn LlmBackend>) -> Backends {
    Backends {
        asr: Arc::new(FixtureFileAsr),
        asr_config: AsrBackendConfig { retry_backoff_ms: 1, ..AsrBackendConfig::default() },
        llm,
        lexicon: demo_lexicon(),
        refine: RefineParams::default(),
        eval: EvalParams::default(),
    }
}

pub fn demo_backends() -> Backends {
    backends_with(Arc::new(DeterministicMock::new(demo_lexicon())))
}

/// A pipeline over a fresh store with the demo rubrics installed.
pub fn demo_pipeline(root: &Path) -> Pipeline {
    pipeline_with(root, demo_backends())
}

pub fn pipeline_with(root: &Path, backends: Backends) -> Pipeline {
    let store = Store::open(root).unwrap();
    for r in demo_rubrics() {
        store.put_rubric(&r).unwrap();
    }
    Pipeline::new(store, backends).unwrap()
}

pub fn transcript_upload(bytes: Vec<u8>) -> Upload {
    Upload {
        session_id: None,
        idempotency_key: None,
        classroom_meta: [("class".to_owned(), "K2-A".to_owned())].into(),
        duration_ms: None,
        payload: UploadPayload::Transcript(bytes),
    }
}

pub fn audio_upload(fixture: Vec<u8>, duration_ms: u64) -> Upload {
    Upload {
        session_id: None,
        idempotency_key: None,
        classroom_meta: Default::default(),
        duration_ms: Some(duration_ms),
        payload: UploadPayload::Audio { bytes: fixture, extension: "json".into() },
    }
}

/// Starts the HTTP API on an ephemeral port and returns its base URL.
pub async fn spawn_server(pipeline: Pipeline, token: Option<String>, max_upload: usize) -> String {
    let pipeline = Arc::new(pipeline);
    let queue = start_workers(pipeline.clone(), 2);
    let state = AppState { pipeline, queue, bearer_token: token };
    i2e_service::api::recover(&state).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router(state, max_upload)).await.unwrap();
    });
    format!("http://{addr}")
}

pub const FABRICATED: &str = "恐龙飞船";

/// Deterministic mock with switches for failure, hallucination and pausing.
#[derive(Default)]
pub struct Scripted {
    inner: Option<DeterministicMock>,
    pub eval_down: AtomicBool,
    pub hallucinate: Mutex<Vec<String>>,
    pub refine_calls: AtomicUsize,
    pub eval_calls: AtomicUsize,
    /// Eval calls past this count wait until `open` is set.
    pub pause_after: Option<usize>,
    open: Mutex<bool>,
    opened: Condvar,
}

impl Scripted {
    pub fn new() -> Self {
        Scripted { inner: Some(DeterministicMock::new(demo_lexicon())), ..Default::default() }
    }

    pub fn paused_after(calls: usize) -> Self {
        Scripted { pause_after: Some(calls), ..Scripted::new() }
    }

    pub fn release(&self) {
        *self.open.lock().unwrap() = true;
        self.opened.notify_all();
    }
}

fn indicator_of(req: &LlmRequest) -> String {
    req.user_prompt.lines().find_map(|l| l.strip_prefix("id: ")).unwrap_or_default().to_owned()
}

impl LlmBackend for Scripted {
    fn model_id(&self) -> String {
        "scripted".into()
    }

    fn send(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        match req.response_schema {
            ResponseSchema::RefineMap { .. } => {
                self.refine_calls.fetch_add(1, Ordering::SeqCst);
            }
            ResponseSchema::EvalOutput => {
                let n = self.eval_calls.fetch_add(1, Ordering::SeqCst);
                if self.eval_down.load(Ordering::SeqCst) {
                    return Err(LlmError::BackendUnavailable("scripted outage".into()));
                }
                if self.pause_after.is_some_and(|k| n >= k) {
                    let mut open = self.open.lock().unwrap();
                    while !*open {
                        open = self.opened.wait(open).unwrap();
                    }
                }
                if self.hallucinate.lock().unwrap().contains(&indicator_of(req)) {
                    let text = serde_json::json!({
                        "located_utterances": [{"segment_id": "seg-0001", "quote": FABRICATED}],
                        "observed": true,
                        "rationale": "made up",
                        "suggestion": "",
                    })
                    .to_string();
                    return Ok(Completion { text, usage: Usage::default(), model_id: self.model_id() });
                }
            }
            ResponseSchema::Json => {}
        }
        self.inner.as_ref().unwrap().send(req)
    }
}
