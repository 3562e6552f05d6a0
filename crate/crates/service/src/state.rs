//! Job state machine for one session.
//!
//! Created → Transcribing → Refining → Evaluating → Scoring → Done, with any
//! working stage able to fail. Failed is terminal until a retry moves the
//! job back to the stage that failed.

use std::collections::BTreeMap;
use std::fmt;

use i2e_agents::eval::EvalParams;
use i2e_agents::refine::RefineParams;
use i2e_core::Scale;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Transcribing,
    Refining,
    Evaluating,
    Scoring,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Transcribing, Stage::Refining, Stage::Evaluating, Stage::Scoring];

    pub fn next(self) -> JobState {
        match self {
            Stage::Transcribing => JobState::Refining,
            Stage::Refining => JobState::Evaluating,
            Stage::Evaluating => JobState::Scoring,
            Stage::Scoring => JobState::Done,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Transcribing => "transcribing",
            Stage::Refining => "refining",
            Stage::Evaluating => "evaluating",
            Stage::Scoring => "scoring",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Created,
    Transcribing,
    Refining,
    Evaluating,
    Scoring,
    Done,
    Failed { stage: Stage, reason: String },
}

impl JobState {
    /// The stage being worked on, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            JobState::Transcribing => Some(Stage::Transcribing),
            JobState::Refining => Some(Stage::Refining),
            JobState::Evaluating => Some(Stage::Evaluating),
            JobState::Scoring => Some(Stage::Scoring),
            _ => None,
        }
    }

    pub fn of_stage(stage: Stage) -> JobState {
        match stage {
            Stage::Transcribing => JobState::Transcribing,
            Stage::Refining => JobState::Refining,
            Stage::Evaluating => JobState::Evaluating,
            Stage::Scoring => JobState::Scoring,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            JobState::Created => "created",
            JobState::Done => "done",
            JobState::Failed { .. } => "failed",
            s => s.stage().unwrap().as_str(),
        }
    }

    pub fn is_running(&self) -> bool {
        self.stage().is_some()
    }

    /// Whether `self → to` is one of the allowed arrows.
    pub fn can_transition(&self, to: &JobState) -> bool {
        match (self, to) {
            (JobState::Created, JobState::Transcribing) => true,
            (JobState::Failed { stage, .. }, to) => to.stage() == Some(*stage),
            (from, JobState::Failed { stage, .. }) => from.stage() == Some(*stage),
            (from, to) => from.stage().is_some_and(|s| s.next() == *to),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: String,
    pub to: String,
    pub at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub indicators_total: usize,
    pub indicators_done: usize,
    pub indicators_flagged: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    /// Rubrics to evaluate; every stored rubric when empty at run time.
    #[serde(default, alias = "rubrics")]
    pub scales: Vec<Scale>,
    #[serde(default)]
    pub skip_asr: bool,
    /// Replaces the service's refinement settings for this session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineParams>,
    /// Replaces the service's evaluation settings for this session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub started_ms: u64,
    pub finished_ms: u64,
    /// Wall time of real work; zero when the stage's artifact already existed.
    pub work_ms: u64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    #[serde(flatten)]
    pub state: JobState,
    pub created_ms: u64,
    #[serde(default)]
    pub transitions: Vec<Transition>,
    #[serde(default)]
    pub retry_count: BTreeMap<Stage, u32>,
    #[serde(default)]
    pub timings: BTreeMap<Stage, StageTiming>,
    #[serde(default)]
    pub progress: Progress,
    #[serde(default)]
    pub options: RunOptions,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: String,
    pub to: String,
}

impl JobRecord {
    pub fn new(now_ms: u64) -> Self {
        JobRecord {
            state: JobState::Created,
            created_ms: now_ms,
            transitions: Vec::new(),
            retry_count: BTreeMap::new(),
            timings: BTreeMap::new(),
            progress: Progress::default(),
            options: RunOptions::default(),
        }
    }

    pub fn transition(&mut self, to: JobState, now_ms: u64) -> Result<(), IllegalTransition> {
        if !self.state.can_transition(&to) {
            return Err(IllegalTransition { from: self.state.label().into(), to: to.label().into() });
        }
        let reason = match &to {
            JobState::Failed { reason, .. } => Some(reason.clone()),
            _ => None,
        };
        self.transitions.push(Transition { from: self.state.label().into(), to: to.label().into(), at_ms: now_ms, reason });
        self.state = to;
        Ok(())
    }

    pub fn total_retries(&self) -> u32 {
        self.retry_count.values().sum()
    }
}
