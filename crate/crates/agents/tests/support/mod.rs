//! Generators and checks shared by the agent property tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use i2e_agents::eval::{evaluate_indicator, parse_eval_prompt, EvalParams, EvalTask};
use i2e_agents::llm::LlmError;
use i2e_agents::mock::{DeterministicMock, FnLlm};
use i2e_agents::refine::{parse_correctable_lines, plan_windows, refine, RejectReason, RefineParams, WindowParams};
use i2e_core::{
    text, validate_transcript, HomophoneLexicon, Indicator, Provenance, Scale, Segment, SpeakerRole, Transcript,
    Validation,
};
use proptest::prelude::*;
use serde_json::json;

const ALPHABET: &[char] = &['我', '们', '进', '区', '去', '玩', '积', '木', '好', '的', '你', '看', '这', '是', '什', '么', '，', '。', '？'];

pub fn text_strategy(max: usize) -> impl Strategy<Value = String> {
    proptest::collection::vec(proptest::sample::select(ALPHABET), 1..=max)
        .prop_map(|cs| cs.into_iter().collect::<String>())
        .prop_filter("needs a scoring character", |s| !text::scoring_chars(s).is_empty())
}

pub fn transcript_strategy(max_segments: usize, provenance: Provenance) -> impl Strategy<Value = Transcript> {
    proptest::collection::vec(
        (text_strategy(12), proptest::sample::select(vec![SpeakerRole::Teacher, SpeakerRole::Child, SpeakerRole::Unknown]), 1u64..3000, 0u64..500),
        1..=max_segments,
    )
    .prop_map(move |rows| {
        let mut t = 0;
        let segments = rows
            .into_iter()
            .enumerate()
            .map(|(i, (txt, sp, len, gap))| {
                let start = t + gap;
                t = start + len;
                Segment::new(format!("seg-{:04}", i + 1), sp, start, t, txt)
            })
            .collect();
        Transcript::new("prop-session", provenance, segments)
    })
}

/// How the scripted model answers one refinement window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowBehavior {
    Echo,
    Correct,
    DropKey,
    ExtraContextKey,
    BogusKey,
    EmptyText,
    SpeakerPrefix,
    NotJson,
}

impl WindowBehavior {
    pub fn id_set_violation(self) -> bool {
        matches!(self, WindowBehavior::DropKey | WindowBehavior::ExtraContextKey | WindowBehavior::BogusKey)
    }

    pub fn accepted(self) -> bool {
        matches!(self, WindowBehavior::Echo | WindowBehavior::Correct)
    }
}

pub fn behavior_strategy() -> impl Strategy<Value = WindowBehavior> {
    use WindowBehavior::*;
    proptest::sample::select(vec![Echo, Correct, DropKey, ExtraContextKey, BogusKey, EmptyText, SpeakerPrefix, NotJson])
}

#[derive(Debug, Clone)]
pub struct RefineCase {
    pub raw: Transcript,
    pub window: WindowParams,
    pub behaviors: Vec<WindowBehavior>,
}

pub fn refine_case_strategy() -> impl Strategy<Value = RefineCase> {
    (
        transcript_strategy(14, Provenance::Raw),
        1usize..6,
        0usize..3,
        prop_oneof![Just(10_000usize), 20usize..80],
        proptest::collection::vec(behavior_strategy(), 1..8),
    )
        .prop_map(|(raw, window_size, context_size, token_budget, behaviors)| RefineCase {
            raw,
            window: WindowParams { window_size, context_size, token_budget },
            behaviors,
        })
}

fn corrected(text: &str) -> String {
    // A visible, deterministic rewrite.
    text.replace('去', "区").replace('们', "门") + "呀"
}

/// Runs one refinement case through a scripted model and checks every structural invariant.
pub fn check_refine_case(case: &RefineCase) -> Result<(), String> {
    let plan = plan_windows(&case.raw, case.window).map_err(|e| e.to_string())?;
    let window_of: BTreeMap<String, usize> = plan
        .windows
        .iter()
        .enumerate()
        .flat_map(|(w, win)| win.correctable_ids.iter().map(move |id| (id.clone(), w)))
        .collect();
    let behavior_of = |w: usize| case.behaviors[w % case.behaviors.len()];

    let plan_for_mock = plan.clone();
    let behaviors = case.behaviors.clone();
    let window_index = window_of.clone();
    let backend = FnLlm::new("prop-script", move |req| {
        let lines = parse_correctable_lines(&req.user_prompt);
        let w = window_index[&lines[0].0];
        let mut map: BTreeMap<String, String> = lines.iter().map(|(id, _, t)| (id.clone(), t.clone())).collect();
        match behaviors[w % behaviors.len()] {
            WindowBehavior::Echo => {}
            WindowBehavior::Correct => map.values_mut().for_each(|t| *t = corrected(t)),
            WindowBehavior::DropKey => {
                let first = map.keys().next().unwrap().clone();
                map.remove(&first);
            }
            WindowBehavior::ExtraContextKey => {
                let win = &plan_for_mock.windows[w];
                let extra = win.context_before_ids.first().or(win.context_after_ids.first()).cloned().unwrap_or_else(|| "seg-9999".into());
                map.insert(extra, "多".into());
            }
            WindowBehavior::BogusKey => {
                map.insert("not-a-segment".into(), "多".into());
            }
            WindowBehavior::EmptyText => {
                let last = map.keys().last().unwrap().clone();
                map.insert(last, "  ".into());
            }
            WindowBehavior::SpeakerPrefix => {
                let (id, t) = map.iter_mut().next().unwrap();
                *t = format!("[{id}|teacher] {t}");
            }
            WindowBehavior::NotJson => return Ok("sorry, here are the corrections".into()),
        }
        Ok(serde_json::to_string(&map).unwrap())
    });

    let params = RefineParams { window: case.window, repair_retries: 1, concurrency: 3 };
    let out = refine(&case.raw, &HomophoneLexicon::default(), &backend, params).map_err(|e| e.to_string())?;
    let refined = &out.transcript;

    let violations = validate_transcript(refined, Some(&case.raw));
    if !violations.is_empty() {
        return Err(format!("structure not preserved: {violations:?}"));
    }
    if refined.provenance != Provenance::Refined {
        return Err("provenance not Refined".into());
    }
    if out.audit.windows.len() != plan.windows.len() {
        return Err("audit window count differs from plan".into());
    }
    for (w, audit) in out.audit.windows.iter().enumerate() {
        let b = behavior_of(w);
        if audit.accepted != b.accepted() {
            return Err(format!("window {w} ({b:?}) accepted={}", audit.accepted));
        }
        if b.id_set_violation() && audit.reject_reason != Some(RejectReason::IdSetMismatch) {
            return Err(format!("window {w} ({b:?}) rejected for {:?}", audit.reject_reason));
        }
    }
    for (raw, fin) in case.raw.segments.iter().zip(&refined.segments) {
        let b = behavior_of(window_of[&raw.id]);
        let expect = if b == WindowBehavior::Correct { corrected(&raw.text) } else { raw.text.clone() };
        if fin.text != expect {
            return Err(format!("{} ({b:?}): got {:?}, want {:?}", raw.id, fin.text, expect));
        }
    }
    let all_rejected = (0..plan.windows.len()).all(|w| !behavior_of(w).accepted());
    if all_rejected && refined.segments.iter().zip(&case.raw.segments).any(|(a, b)| a.text != b.text) {
        return Err("all windows rejected but text changed".into());
    }
    Ok(())
}

/// What the scripted evaluator does.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalBehavior {
    /// Rule-based honest mock.
    Honest,
    /// Returns the given reply (indices into the prompt's segment list, with
    /// quote offsets) regardless of the prompt.
    Random { observed: bool, cites: Vec<(usize, usize, usize, bool)> },
    /// Claims observation with quotes that appear nowhere in the transcript.
    Hallucinate { cite_real_id: bool },
    /// Claims observation without any evidence.
    NoEvidence,
}

pub fn eval_behavior_strategy() -> impl Strategy<Value = EvalBehavior> {
    prop_oneof![
        Just(EvalBehavior::Honest),
        (any::<bool>(), proptest::collection::vec((0usize..20, 0usize..12, 1usize..6, any::<bool>()), 0..4))
            .prop_map(|(observed, cites)| EvalBehavior::Random { observed, cites }),
        any::<bool>().prop_map(|cite_real_id| EvalBehavior::Hallucinate { cite_real_id }),
        Just(EvalBehavior::NoEvidence),
    ]
}

pub fn indicator_strategy() -> impl Strategy<Value = Indicator> {
    proptest::collection::vec(text_strategy(3), 0..3).prop_map(|positive_examples| Indicator {
        id: "SSTEW.1.L3.1".into(),
        scale: Scale::Sstew,
        item_id: "1".into(),
        level: 3,
        description: "Teacher extends the child's talk.".into(),
        positive_examples,
        negative_examples: vec![],
        language_accessible: true,
    })
}

/// A quote built from characters that never occur in generated transcripts.
pub const FABRICATED_QUOTE: &str = "恐龙飞船";

pub fn eval_backend(behavior: &EvalBehavior) -> Arc<dyn i2e_agents::llm::LlmBackend> {
    match behavior.clone() {
        EvalBehavior::Honest => Arc::new(DeterministicMock::new(HomophoneLexicon::default())),
        EvalBehavior::Random { observed, cites } => Arc::new(FnLlm::new("prop-eval", move |req| {
            let p = parse_eval_prompt(&req.user_prompt);
            let located: Vec<_> = cites
                .iter()
                .map(|&(seg, start, len, fabricate)| {
                    let (id, text) = p.segments.get(seg % p.segments.len().max(1)).map(|s| (s.0.clone(), s.2.clone())).unwrap_or_default();
                    let chars: Vec<char> = text.chars().collect();
                    let quote: String = if fabricate || chars.is_empty() {
                        FABRICATED_QUOTE.into()
                    } else {
                        let a = start % chars.len();
                        chars[a..(a + len).min(chars.len())].iter().collect()
                    };
                    json!({"segment_id": id, "quote": quote})
                })
                .collect();
            Ok(json!({"located_utterances": located, "observed": observed, "rationale": "r", "suggestion": "s"}).to_string())
        })),
        EvalBehavior::Hallucinate { cite_real_id } => Arc::new(FnLlm::new("prop-hallucinate", move |req| {
            let p = parse_eval_prompt(&req.user_prompt);
            let id = if cite_real_id { p.segments[0].0.clone() } else { "seg-ghost".into() };
            Ok(json!({"located_utterances": [{"segment_id": id, "quote": FABRICATED_QUOTE}],
                      "observed": true, "rationale": "r", "suggestion": ""})
            .to_string())
        })),
        EvalBehavior::NoEvidence => Arc::new(FnLlm::new("prop-noevidence", |_| {
            Ok(json!({"located_utterances": [], "observed": true, "rationale": "r", "suggestion": ""}).to_string())
        })),
    }
}

pub fn check_evidence_case(t: &Transcript, ind: &Indicator, behavior: &EvalBehavior, budget: usize) -> Result<(), String> {
    let backend = eval_backend(behavior);
    let task = EvalTask { session_id: &t.session_id, indicator: ind, transcript: t, prompt_version: "prop" };
    let params = EvalParams { token_budget: budget, ..EvalParams::default() };
    let j = evaluate_indicator(&task, &backend, &params).map_err(|e: LlmError| e.to_string())?;
    if j.validation == Validation::Valid && j.observed {
        for e in &j.evidence {
            let seg = t.segment(&e.segment_id).ok_or_else(|| format!("Valid judgment cites unknown {}", e.segment_id))?;
            if !text::contains_verbatim(&seg.text, &e.quote) {
                return Err(format!("Valid judgment quote {:?} not in {:?}", e.quote, seg.text));
            }
        }
        if j.evidence.is_empty() {
            return Err("Valid observed judgment without evidence".into());
        }
    }
    if matches!(behavior, EvalBehavior::Hallucinate { .. } | EvalBehavior::NoEvidence) && !j.validation.is_flagged() {
        return Err(format!("{behavior:?} produced {:?}", j.validation));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Mock-manifest corpora for error categorization

use i2e_agents::asr::{AsrFixture, FixtureUtterance, Injection};
use i2e_core::LexiconEntry;

/// (right, wrong, pinyin) pairs; their characters never occur in the plain pool.
pub const HOMOPHONES: [(&str, &str, &str); 3] =
    [("进区", "进去", "jin qu"), ("沉浮", "臣服", "chen fu"), ("时间", "实践", "shi jian")];

pub fn homophone_lexicon() -> HomophoneLexicon {
    HomophoneLexicon::new(
        HOMOPHONES
            .iter()
            .map(|(right, wrong, pinyin)| LexiconEntry {
                wrong: (*wrong).into(),
                right: (*right).into(),
                gloss_wrong: String::new(),
                gloss_right: String::new(),
                pinyin: (*pinyin).into(),
            })
            .collect(),
    )
    .unwrap()
}

const PLAIN_POOL: &str = "天地人山水火木金土日月星云风雨雪花草树鸟鱼虫马牛羊狗猫书本笔纸桌椅门窗灯车船球";
const EXTRA_POOL: &str = "啊呀哦嗯哈";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Homophone(usize),
    Omission(usize),
    Extra(usize),
    Comma,
}

#[derive(Debug, Clone)]
pub struct UttPlan {
    pub sites: Vec<Site>,
    pub flip_speaker: bool,
    pub split: bool,
    pub swap_final_mark: bool,
}

fn site_strategy() -> impl Strategy<Value = Site> {
    prop_oneof![
        (0usize..3).prop_map(Site::Homophone),
        (1usize..3).prop_map(Site::Omission),
        (1usize..3).prop_map(Site::Extra),
        Just(Site::Comma),
    ]
}

pub fn corpus_strategy() -> impl Strategy<Value = Vec<UttPlan>> {
    proptest::collection::vec(
        (proptest::collection::vec(site_strategy(), 0..4), any::<bool>(), any::<bool>(), any::<bool>()).prop_map(
            |(sites, flip_speaker, split, swap_final_mark)| {
                // Each homophone word at most once per utterance keeps characters distinct.
                let mut seen = std::collections::BTreeSet::new();
                let sites: Vec<Site> =
                    sites.into_iter().filter(|s| !matches!(s, Site::Homophone(k) if !seen.insert(*k))).collect();
                // A split leaves its utterance otherwise untouched.
                let split = split && sites.is_empty() && !swap_final_mark && !flip_speaker;
                UttPlan { sites, flip_speaker, split, swap_final_mark }
            },
        ),
        1..6,
    )
}

/// Builds a fixture from a corpus plan. Plain characters are distinct within
/// an utterance and every injection is separated by at least three matched
/// characters, so each injection is exactly one error event.
pub fn build_fixture(plan: &[UttPlan]) -> AsrFixture {
    let pool: Vec<char> = PLAIN_POOL.chars().collect();
    let extra: Vec<char> = EXTRA_POOL.chars().collect();
    let mut utterances = Vec::new();
    let mut injections = Vec::new();
    let mut clock = 0u64;
    for (u, p) in plan.iter().enumerate() {
        let mut next_plain = 0;
        let mut take = |n: usize| -> String {
            let s: String = pool[next_plain..next_plain + n].iter().collect();
            next_plain += n;
            s
        };
        let mut text = take(3);
        for site in &p.sites {
            let at = text.chars().count();
            match *site {
                Site::Homophone(k) => {
                    let (right, wrong, _) = HOMOPHONES[k];
                    text.push_str(right);
                    injections.push(Injection::Homophone { utterance: u, at, from: right.into(), to: wrong.into() });
                }
                Site::Omission(n) => {
                    text.push_str(&take(n));
                    injections.push(Injection::Omission { utterance: u, at, len: n });
                }
                Site::Extra(n) => {
                    injections.push(Injection::ExtraWords { utterance: u, at, text: extra[..n].iter().collect() });
                }
                Site::Comma => {
                    injections.push(Injection::Punctuation { utterance: u, at, from: String::new(), to: "，".into() });
                }
            }
            text.push_str(&take(3));
        }
        let final_at = text.chars().count();
        text.push('。');
        if p.swap_final_mark {
            injections.push(Injection::Punctuation { utterance: u, at: final_at, from: "。".into(), to: "？".into() });
        }
        let speaker = if u % 2 == 0 { "teacher" } else { "child" };
        if p.flip_speaker {
            injections.push(Injection::SpeakerIdentification {
                utterance: u,
                speaker: if u % 2 == 0 { "child" } else { "teacher" }.into(),
            });
        }
        if p.split {
            injections.push(Injection::Segmentation { utterance: u, at: 2 });
        }
        let len = 200 * text.chars().count() as u64;
        utterances.push(FixtureUtterance { speaker: speaker.into(), start_ms: clock + 100, end_ms: clock + 100 + len, text });
        clock += 100 + len;
    }
    AsrFixture { session_id: "corpus".into(), duration_ms: clock + 1000, utterances, injections }
}
