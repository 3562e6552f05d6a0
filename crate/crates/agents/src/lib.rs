//! Model-facing agents: the ASR gateway, the LLM client, and the refinement
//! and evaluation agents built on them.

pub mod asr;
pub mod eval;
pub mod http;
pub mod limit;
pub mod llm;
pub mod mock;
pub mod refine;

pub use asr::{
    mock_transcribe, AsrBackend, AsrBackendConfig, AsrError, AsrFixture, AsrGateway, AsrResult, FixtureFileAsr, MockAsr,
};
pub use eval::{evaluate_indicator, evaluate_session, EvalError, EvalParams, EvalTask};
pub use http::{HttpAsr, HttpLlm, HttpLlmConfig};
pub use llm::{complete, LlmBackend, LlmError, LlmRequest, LlmResponse, ResponseSchema};
pub use mock::{DeterministicMock, ScriptedLlm};
pub use refine::{refine, RefineAudit, RefineError, RefineOutcome, RefineParams, WindowParams};
