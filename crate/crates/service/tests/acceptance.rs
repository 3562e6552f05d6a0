//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Runs without the libtest harness so the
//! lines are always shown.

mod support;

#[path = "../../agents/tests/support/mod.rs"]
mod agent_support;

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use i2e_agents::asr::mock_transcribe;
use i2e_core::metrics::{
    align, categorize_errors, compute_cer, efficiency_gain, kappa_from_labels, overall_means, AgreementStats, EditOp,
    ErrorCategory, NormalizationPolicy, WorkflowTimings,
};
use i2e_core::{derive_item_score, text, Indicator, IndicatorJudgment, Provenance, RubricItem, Scale, Transcript, Validation};
use i2e_service::pipeline::{Pipeline, StatusView};
use i2e_service::report::Report;
use i2e_service::state::{JobState, RunOptions, Stage};
use i2e_service::store::{Store, REFINED_TRANSCRIPT};
use proptest::strategy::{Just, Strategy};
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use reqwest::multipart::{Form, Part};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn fixture(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name);
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

// ---------------------------------------------------------------------------
// Scoring

const LEVELS: [u8; 4] = [1, 3, 5, 7];

fn build_item(shape: &[(u8, usize)]) -> RubricItem {
    let indicators = shape
        .iter()
        .flat_map(|&(level, n)| {
            (1..=n).map(move |k| Indicator {
                id: format!("SSTEW.9.L{level}.{k}"),
                scale: Scale::Sstew,
                item_id: "9".into(),
                level,
                description: String::new(),
                positive_examples: vec![],
                negative_examples: vec![],
                language_accessible: true,
            })
        })
        .collect();
    RubricItem { id: "9".into(), scale: Scale::Sstew, dimension: "d".into(), title: "t".into(), indicators }
}

/// Every shape with a non-empty subset of the four levels and 1..=max indicators per level.
fn shapes(max: usize) -> Vec<Vec<(u8, usize)>> {
    let mut out = Vec::new();
    for subset in 1u32..16 {
        let levels: Vec<u8> = (0..4).filter(|k| subset >> k & 1 == 1).map(|k| LEVELS[k]).collect();
        let combos = max.pow(levels.len() as u32);
        for c in 0..combos {
            out.push(levels.iter().enumerate().map(|(k, l)| (*l, c / max.pow(k as u32) % max + 1)).collect());
        }
    }
    out
}

fn scoring_oracle() -> Outcome {
    let clock = Instant::now();
    let mut patterns = 0u64;
    for shape in shapes(4) {
        let item = build_item(&shape);
        let ids: Vec<String> = item.indicators.iter().map(|i| i.id.clone()).collect();
        let mut judgments: BTreeMap<String, bool> = ids.iter().map(|id| (id.clone(), false)).collect();
        for bits in 0..1u32 << ids.len() {
            for (k, id) in ids.iter().enumerate() {
                *judgments.get_mut(id).unwrap() = bits >> k & 1 == 1;
            }
            let mut offset = 0;
            let table: Vec<(u8, Vec<bool>)> = shape
                .iter()
                .map(|&(level, n)| {
                    let vals = (offset..offset + n).map(|k| bits >> k & 1 == 1).collect();
                    offset += n;
                    (level, vals)
                })
                .collect();
            let got = derive_item_score(&item, &judgments).map_err(|e| format!("{shape:?}: {e}"))?.score;
            let want = oracles::item_score_oracle(&table);
            ensure!(got == want, "shape {shape:?} pattern {bits:b}: got {got}, oracle {want}");
            patterns += 1;
        }
    }
    let elapsed = clock.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{patterns} patterns in {:.2}s", elapsed.as_secs_f64()))
}

fn midpoint_boundary() -> Outcome {
    let mut cases = 0u64;
    let (mut odd, mut even) = (0u64, 0u64);
    for counts in 0..6usize.pow(4) {
        let shape: Vec<(u8, usize)> = (0..4).map(|k| (LEVELS[k], counts / 6usize.pow(k as u32) % 6 + 1)).collect();
        let item = build_item(&shape);
        // all levels through `base` met, `m` of the next level's indicators met
        for base in 0..3 {
            let next_n = shape[base + 1].1;
            for m in 0..next_n {
                for higher_met in [false, true] {
                    let mut judgments = BTreeMap::new();
                    for ind in &item.indicators {
                        let pos = LEVELS.iter().position(|l| *l == ind.level).unwrap();
                        let k: usize = ind.id.rsplit('.').next().unwrap().parse().unwrap();
                        let met = match pos.cmp(&(base + 1)) {
                            std::cmp::Ordering::Less => true,
                            std::cmp::Ordering::Equal => k <= m,
                            std::cmp::Ordering::Greater => higher_met,
                        };
                        judgments.insert(ind.id.clone(), met);
                    }
                    let s = derive_item_score(&item, &judgments).map_err(|e| e.to_string())?;
                    let (level, next) = (LEVELS[base], LEVELS[base + 1]);
                    let want = if 2 * m > next_n { (level + next) / 2 } else { level };
                    ensure!(
                        s.score == want,
                        "shape {shape:?}, base L{level}, {m}/{next_n} of L{next} met: got {}, want {want}",
                        s.score
                    );
                    ensure!((s.next_level_fraction - m as f64 / next_n as f64).abs() < 1e-12, "fraction {}", s.next_level_fraction);
                    if 2 * m == next_n {
                        odd += 1;
                    }
                    if 2 * m > next_n {
                        ensure!([2, 4, 6].contains(&s.score), "midpoint score {}", s.score);
                        even += 1;
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} constructed items ({odd} at exactly 1/2, {even} above 1/2)"))
}

// ---------------------------------------------------------------------------
// Agreement

fn stats_identities(s: &AgreementStats, n: usize) -> Result<(), String> {
    let c = s.confusion;
    let (a, b, cc, d) = (c.both_true as f64, c.model_only as f64, c.human_only as f64, c.both_false as f64);
    let nf = n as f64;
    ensure!(c.total() as usize == n, "confusion total {} != {n}", c.total());
    ensure!((s.p_o - (a + d) / nf).abs() < 1e-12, "p_o identity");
    ensure!(s.pct_agreement == s.p_o, "pct_agreement != p_o");
    ensure!((s.p_e - ((a + b) * (a + cc) + (cc + d) * (b + d)) / (nf * nf)).abs() < 1e-12, "p_e identity");
    ensure!((0.0..=1.0).contains(&s.p_o) && (0.0..=1.0).contains(&s.p_e), "proportions out of range");
    match s.kappa {
        Some(k) => {
            ensure!(s.p_e != 1.0, "kappa defined with p_e = 1");
            ensure!((k * (1.0 - s.p_e) - (s.p_o - s.p_e)).abs() < 1e-12, "kappa identity");
            ensure!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k), "kappa {k} out of range");
        }
        None => ensure!(s.p_e == 1.0, "kappa undefined with p_e = {}", s.p_e),
    }
    Ok(())
}

fn kappa_criterion() -> Outcome {
    let pairs = proptest::collection::vec(proptest::arbitrary::any::<(bool, bool)>(), 1..=50);
    runner(1000)
        .run(&pairs, |pairs| {
            let (x, y): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let s = kappa_from_labels(&x, &y).map_err(|e| TestCaseError::fail(e.to_string()))?;
            stats_identities(&s, x.len()).map_err(TestCaseError::fail)?;
            let (p_o, p_e, kappa) = oracles::kappa_oracle(&x, &y);
            if (s.p_o - p_o).abs() >= 1e-12 || (s.p_e - p_e).abs() >= 1e-12 {
                return Err(TestCaseError::fail(format!("p_o/p_e {:?} vs {:?}", (s.p_o, s.p_e), (p_o, p_e))));
            }
            match (s.kappa, kappa) {
                (Some(a), Some(b)) if (a - b).abs() < 1e-12 => Ok(()),
                (None, None) => Ok(()),
                other => Err(TestCaseError::fail(format!("kappa {other:?}"))),
            }
        })
        .map_err(|e| format!("dual implementation: {e}"))?;

    let balanced = (1usize..=25).prop_flat_map(|n| {
        let mut v = vec![true; n];
        v.extend(vec![false; n]);
        Just(v).prop_shuffle()
    });
    runner(300)
        .run(&balanced, |x| {
            let not_x: Vec<bool> = x.iter().map(|v| !v).collect();
            let same = kappa_from_labels(&x, &x).unwrap();
            let flipped = kappa_from_labels(&x, &not_x).unwrap();
            stats_identities(&same, x.len()).map_err(TestCaseError::fail)?;
            stats_identities(&flipped, x.len()).map_err(TestCaseError::fail)?;
            if same.kappa != Some(1.0) || flipped.kappa != Some(-1.0) {
                return Err(TestCaseError::fail(format!("k(x,x)={:?} k(x,!x)={:?}", same.kappa, flipped.kappa)));
            }
            Ok(())
        })
        .map_err(|e| format!("balanced labels: {e}"))?;
    Ok("1000 random pairs within 1e-12, 300 balanced vectors".into())
}

fn table2_means() -> Outcome {
    let table = fixture("paper_table2.json");
    let mut cells = 0;
    let mut seen = BTreeMap::new();
    for scale in table["scales"].as_array().unwrap() {
        for model in scale["models"].as_array().unwrap() {
            let rows = model["dimensions"]
                .as_array()
                .unwrap()
                .iter()
                .map(|d| (d["kappa"].as_f64(), d["pct_agreement"].as_f64().unwrap()));
            let (kappa, pct) = overall_means(rows);
            let want = &model["overall_mean"];
            for (name, got, want) in [("kappa", kappa, &want["kappa"]), ("pct", pct, &want["pct_agreement"])] {
                let (got, want) = (got.unwrap(), want.as_f64().unwrap());
                ensure!((got - want).abs() <= 0.0005 + 1e-12, "{} {} {name}: {got:.4} vs {want}", scale["scale"], model["model"]);
                cells += 1;
            }
            seen.insert(format!("{}/{}", scale["scale"].as_str().unwrap(), model["model"].as_str().unwrap()), (kappa, pct));
        }
    }
    ensure!(cells == 16, "{cells} cells");
    let gpt = seen["ECQRS-EC/GPT-5"].0.unwrap();
    ensure!((gpt - 0.638).abs() <= 0.0005, "GPT-5 ECQRS kappa {gpt}");
    let (k, p) = seen["SSTEW/DeepSeek-v3.1"];
    ensure!((k.unwrap() - 0.741).abs() <= 0.0005 && (p.unwrap() - 0.879).abs() <= 0.0005, "DeepSeek SSTEW {k:?} {p:?}");
    Ok(format!("{cells} overall-mean cells"))
}

// ---------------------------------------------------------------------------
// CER and error categories

fn cer_oracle() -> Outcome {
    let alphabet = vec!['进', '区', '去', '了', 'a', 'b'];
    let pair = (0usize..=24).prop_flat_map(move |la| {
        let pick = proptest::sample::select(alphabet.clone());
        (proptest::collection::vec(pick.clone(), la), proptest::collection::vec(pick, 0..=24 - la))
    });
    runner(500)
        .run(&pair, |(a, b)| {
            let (min, triples) = oracles::edit_scripts_oracle(&a, &b);
            let ops = align(&a, &b);
            let (mut s, mut d, mut i, mut rebuilt) = (0, 0, 0, Vec::new());
            for op in &ops {
                match *op {
                    EditOp::Match { ref_pos, .. } => rebuilt.push(a[ref_pos]),
                    EditOp::Substitute { hyp_pos, .. } => {
                        s += 1;
                        rebuilt.push(b[hyp_pos]);
                    }
                    EditOp::Insert { hyp_pos } => {
                        i += 1;
                        rebuilt.push(b[hyp_pos]);
                    }
                    EditOp::Delete { .. } => d += 1,
                }
            }
            if s + d + i != min || !triples.contains(&(s, d, i)) || rebuilt != b {
                return Err(TestCaseError::fail(format!("{a:?}/{b:?}: dp ({s},{d},{i}) vs oracle {min} {triples:?}")));
            }
            if !a.is_empty() {
                let (ra, rb): (String, String) = (a.iter().collect(), b.iter().collect());
                let c = compute_cer(&ra, &rb, NormalizationPolicy::default()).unwrap();
                if c.edits() != min || (c.cer - min as f64 / a.len() as f64).abs() > 1e-12 {
                    return Err(TestCaseError::fail(format!("compute_cer {ra}/{rb}: {c:?}")));
                }
                if compute_cer(&ra, &ra, NormalizationPolicy::default()).unwrap().cer != 0.0 {
                    return Err(TestCaseError::fail(format!("CER({ra},{ra}) != 0")));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let c = compute_cer("进区了", "进去了", NormalizationPolicy::default()).map_err(|e| e.to_string())?;
    ensure!(
        (c.substitutions, c.deletions, c.insertions, c.ref_chars) == (1, 0, 0, 3) && (c.cer - 1.0 / 3.0).abs() < 1e-12,
        "进区了/进去了: {c:?}"
    );
    Ok("500 pairs match exhaustive search, 进区了/进去了 = 1/3".into())
}

fn error_categories() -> Outcome {
    let shares = fixture("paper_error_categories.json");
    let sum: f64 = shares["shares_pct"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
    ensure!((sum - 100.0).abs() <= 0.01, "shares sum to {sum}");
    let events = std::cell::Cell::new(0usize);
    runner(500)
        .run(&agent_support::corpus_strategy(), |plan| {
            let fixture = agent_support::build_fixture(&plan);
            let m = mock_transcribe(&fixture).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let report = categorize_errors(&m.gold, &m.result.transcript, &agent_support::homophone_lexicon())
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let expected = m.manifest_counts();
            for c in ErrorCategory::ALL {
                let want = expected.get(&c).copied().unwrap_or(0);
                if report.count(c) != want {
                    return Err(TestCaseError::fail(format!("{c:?}: got {}, manifest {want}", report.count(c))));
                }
            }
            events.set(events.get() + report.total);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("shares sum to {sum:.2}; 500 corpora, {} injected errors recovered", events.get()))
}

// ---------------------------------------------------------------------------
// Agents

fn refinement_invariants() -> Outcome {
    let check = |case: agent_support::RefineCase| agent_support::check_refine_case(&case).map_err(TestCaseError::fail);
    runner(1000).run(&agent_support::refine_case_strategy(), check).map_err(|e| e.to_string())?;
    // every window rejected: output text must equal the raw text
    let rejecting = agent_support::refine_case_strategy().prop_map(|mut c| {
        for b in &mut c.behaviors {
            if b.accepted() {
                *b = agent_support::WindowBehavior::NotJson;
            }
        }
        c
    });
    runner(200).run(&rejecting, check).map_err(|e| format!("all-rejected: {e}"))?;
    Ok("1000 random cases plus 200 all-rejected cases".into())
}

fn verbatim_ok(t: &Transcript, judgments: &[IndicatorJudgment]) -> Result<usize, String> {
    let mut valid = 0;
    for j in judgments.iter().filter(|j| j.validation == Validation::Valid && j.observed) {
        ensure!(!j.evidence.is_empty(), "{} Valid without evidence", j.indicator_id);
        for e in &j.evidence {
            let seg = t.segment(&e.segment_id).ok_or_else(|| format!("{} cites {}", j.indicator_id, e.segment_id))?;
            ensure!(text::contains_verbatim(&seg.text, &e.quote), "{}: {:?} not in {:?}", j.indicator_id, e.quote, seg.text);
        }
        valid += 1;
    }
    Ok(valid)
}

fn evidence_soundness() -> Outcome {
    let cases = (
        agent_support::transcript_strategy(8, Provenance::Refined),
        agent_support::indicator_strategy(),
        agent_support::eval_behavior_strategy(),
        proptest::prop_oneof![Just(100_000usize), 200usize..700],
    );
    runner(1000)
        .run(&cases, |(t, ind, behavior, budget)| {
            agent_support::check_evidence_case(&t, &ind, &behavior, budget).map_err(TestCaseError::fail)
        })
        .map_err(|e| e.to_string())?;
    let fabricating = (
        agent_support::transcript_strategy(8, Provenance::Refined),
        agent_support::indicator_strategy(),
        proptest::arbitrary::any::<bool>(),
    );
    runner(300)
        .run(&fabricating, |(t, ind, cite_real_id)| {
            for b in [agent_support::EvalBehavior::Hallucinate { cite_real_id }, agent_support::EvalBehavior::NoEvidence] {
                agent_support::check_evidence_case(&t, &ind, &b, 100_000).map_err(TestCaseError::fail)?;
            }
            Ok(())
        })
        .map_err(|e| format!("hallucination: {e}"))?;

    // full pipeline runs: honest mock and a mock fabricating one quote
    let mut valid = 0;
    for hallucinate in [false, true] {
        let llm = Arc::new(support::Scripted::new());
        if hallucinate {
            llm.hallucinate.lock().unwrap().push("SSTEW.2.L5.1".into());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = support::pipeline_with(dir.path(), support::backends_with(llm));
        p.create_session(support::transcript_upload(support::demo_bytes("transcript_raw.json"))).unwrap();
        p.request_run("demo-001", RunOptions::default()).map_err(|e| e.to_string())?;
        ensure!(p.execute("demo-001").map_err(|e| e.to_string())? == JobState::Done, "pipeline did not finish");
        let refined: Transcript = p.store().artifact("demo-001", REFINED_TRANSCRIPT).unwrap().unwrap();
        for scale in [Scale::Sstew, Scale::EcqrsEc] {
            let js = p.judgments("demo-001", scale).unwrap().unwrap();
            valid += verbatim_ok(&refined, &js)?;
            if hallucinate && scale == Scale::Sstew {
                let j = js.iter().find(|j| j.indicator_id == "SSTEW.2.L5.1").unwrap();
                ensure!(j.validation.is_flagged(), "fabricated quote judged {:?}", j.validation);
            }
        }
    }
    Ok(format!("1000 random runs, 600 fabricated runs flagged, {valid} Valid pipeline judgments verbatim"))
}

// ---------------------------------------------------------------------------
// End to end

fn audio_upload() -> i2e_service::pipeline::Upload {
    let bytes = support::demo_bytes("asr_session.json");
    let doc: Value = serde_json::from_slice(&bytes).unwrap();
    let mut upload = support::audio_upload(bytes, doc["duration_ms"].as_u64().unwrap());
    // an audio payload carries no session id of its own; the client names it
    upload.session_id = doc["session_id"].as_str().map(str::to_owned);
    upload
}

/// Uploads the transcript session and the audio session; returns their ids.
fn upload_both(p: &Pipeline) -> Vec<String> {
    vec![
        p.create_session(support::transcript_upload(support::demo_bytes("transcript_raw.json"))).unwrap().session_id,
        p.create_session(audio_upload()).unwrap().session_id,
    ]
}

/// Every file of every session except the job record and audit log, which
/// carry wall-clock times.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let sessions = root.join("sessions");
    for session in std::fs::read_dir(&sessions).unwrap() {
        let session = session.unwrap().path();
        for f in std::fs::read_dir(&session).unwrap() {
            let f = f.unwrap().path();
            let name = f.file_name().unwrap().to_string_lossy().into_owned();
            if name == "state.json" || name == "audit.jsonl" {
                continue;
            }
            let key = format!("{}/{name}", session.file_name().unwrap().to_string_lossy());
            out.insert(key, std::fs::read(&f).unwrap());
        }
    }
    out
}

fn diff(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}

fn end_to_end() -> Outcome {
    let clock = Instant::now();
    let accessible: BTreeSet<String> =
        support::demo_rubrics().iter().flat_map(|r| r.accessible_indicators().map(|i| i.id.clone()).collect::<Vec<_>>()).collect();

    let mut runs = Vec::new();
    let mut ids = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let p = support::demo_pipeline(dir.path());
        ids = upload_both(&p);
        for id in &ids {
            p.request_run(id, RunOptions::default()).map_err(|e| e.to_string())?;
            ensure!(p.execute(id).map_err(|e| e.to_string())? == JobState::Done, "{id} did not finish");
            let (report, _) = p.report(id).map_err(|e| e.to_string())?;
            let listed: Vec<&String> = report.scales.iter().flat_map(|s| &s.items).flat_map(|i| &i.indicators).map(|v| &v.indicator_id).collect();
            ensure!(listed.len() == accessible.len(), "{id}: {} report entries for {} indicators", listed.len(), accessible.len());
            ensure!(listed.into_iter().cloned().collect::<BTreeSet<_>>() == accessible, "{id}: report ids differ from accessible set");
            ensure!(report.indicators_total == accessible.len(), "{id}: indicators_total {}", report.indicators_total);
        }
        runs.push((snapshot(dir.path()), dir));
    }
    let baseline = &runs[0].0;
    let differing = diff(baseline, &runs[1].0);
    ensure!(differing.is_empty(), "second run differs in {differing:?}");
    for id in &ids {
        for artifact in ["raw_transcript.json", "refined_transcript.json", "report.json"] {
            ensure!(baseline.contains_key(&format!("{id}/{artifact}")), "{id} lacks {artifact}");
        }
    }

    let boundaries = [None, Some(Stage::Transcribing), Some(Stage::Refining), Some(Stage::Evaluating)];
    for halt in boundaries {
        let dir = tempfile::tempdir().unwrap();
        {
            let p = support::demo_pipeline(dir.path());
            for id in upload_both(&p) {
                p.request_run(&id, RunOptions::default()).map_err(|e| e.to_string())?;
                if let Some(stage) = halt {
                    let state = p.execute_until(&id, Some(stage)).map_err(|e| e.to_string())?;
                    ensure!(state.is_running(), "{id} halted after {stage:?} in {state:?}");
                }
            }
        }
        // the process is gone; a new one recovers from the directory alone
        let p = Pipeline::new(Store::open(dir.path()).unwrap(), support::demo_backends()).unwrap();
        let pending = p.recover().map_err(|e| e.to_string())?;
        ensure!(pending.len() == 2, "recovered {pending:?} after {halt:?}");
        for id in &pending {
            ensure!(p.execute(id).map_err(|e| e.to_string())? == JobState::Done, "{id} after {halt:?}");
        }
        let differing = diff(baseline, &snapshot(dir.path()));
        ensure!(differing.is_empty(), "resume after {halt:?} differs in {differing:?}");
    }
    let elapsed = clock.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "{} files per run identical across 2 runs and {} kill points; {} indicators reported; {:.2}s",
        baseline.len(),
        boundaries.len(),
        accessible.len(),
        elapsed.as_secs_f64()
    ))
}

fn efficiency() -> Outcome {
    let r = efficiency_gain(&WorkflowTimings::reference()).map_err(|e| e.to_string())?;
    ensure!((r.total_traditional_min, r.total_automated_min) == (380.0, 21.0), "totals {r:?}");
    ensure!((r.speedup - 18.095).abs() < 5e-4, "speedup {}", r.speedup);
    ensure!(r.render_speedup() == "18\u{d7}", "rendered {}", r.render_speedup());
    let h = r.hours_at(100);
    ensure!((h.traditional_hours - 633.3).abs() < 0.05 && h.traditional_hours.round() == 633.0, "traditional {}", h.traditional_hours);
    ensure!((h.automated_hours - 35.0).abs() < 1e-9, "automated {}", h.automated_hours);
    Ok(format!(
        "380/21 min, {:.3} -> {}, {:.1} vs {:.1} hours at 100 classrooms",
        r.speedup,
        r.render_speedup(),
        h.traditional_hours,
        h.automated_hours
    ))
}

// ---------------------------------------------------------------------------
// Service contract over HTTP

struct Api {
    c: Client,
    base: String,
}

impl Api {
    async fn start(p: Pipeline) -> Api {
        Api { c: Client::new(), base: support::spawn_server(p, None, 1 << 20).await }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.base)
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.c.get(self.url(path)).send().await.unwrap();
        (r.status(), r.json().await.unwrap_or(Value::Null))
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.c.post(self.url(path)).json(&body).send().await.unwrap();
        (r.status(), r.json().await.unwrap_or(Value::Null))
    }

    async fn upload(&self, form: Form, key: Option<&str>) -> (StatusCode, Value) {
        let mut req = self.c.post(self.url("/sessions")).multipart(form);
        if let Some(k) = key {
            req = req.header("Idempotency-Key", k);
        }
        let r = req.send().await.unwrap();
        (r.status(), r.json().await.unwrap_or(Value::Null))
    }

    async fn status(&self, id: &str) -> StatusView {
        let (code, v) = self.get(&format!("/sessions/{id}/status")).await;
        assert_eq!(code, StatusCode::OK, "{v}");
        serde_json::from_value(v).unwrap()
    }

    async fn wait_terminal(&self, id: &str) -> StatusView {
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            let s = self.status(id).await;
            if matches!(s.state, JobState::Done | JobState::Failed { .. }) {
                return s;
            }
            assert!(Instant::now() < deadline, "{id} stuck in {:?}", s.state);
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    async fn report(&self, id: &str) -> (Report, String) {
        let r = self.c.get(self.url(&format!("/sessions/{id}/report"))).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        let text = r.text().await.unwrap();
        (serde_json::from_str(&text).unwrap(), text)
    }
}

fn transcript_form(class: &str) -> Form {
    Form::new()
        .part("transcript", Part::bytes(support::demo_bytes("transcript_raw.json")).file_name("t.json"))
        .text("classroom_meta", json!({"class": class}).to_string())
}

fn item_oracle(report: &Report, scale: Scale, item_id: &str) -> (u8, u8, bool) {
    let rubric = support::demo_rubrics().into_iter().find(|r| r.scale == scale).unwrap();
    let view = report.scales.iter().find(|s| s.scale == scale).unwrap().items.iter().find(|i| i.item_id == item_id).unwrap();
    let table: Vec<(u8, Vec<bool>)> = rubric
        .item(item_id)
        .unwrap()
        .levels()
        .into_iter()
        .filter_map(|(level, inds)| {
            let vals: Vec<bool> = inds
                .iter()
                .filter(|ind| ind.language_accessible)
                .map(|ind| view.indicators.iter().find(|v| v.indicator_id == ind.id).unwrap().observed)
                .collect();
            (!vals.is_empty()).then_some((level, vals))
        })
        .collect();
    (view.score, oracles::item_score_oracle(&table), view.provisional)
}

async fn contract_sessions(log: &mut Vec<String>) {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(support::demo_pipeline(dir.path())).await;

    let (code, body) = api.upload(transcript_form("K2-A"), Some("key-1")).await;
    assert_eq!(code, StatusCode::CREATED, "{body}");
    assert_eq!(body["session_id"], "demo-001");
    assert_eq!(api.status("demo-001").await.state, JobState::Created);
    log.push("transcript upload -> 201, Created".into());

    let (code, body) = api.upload(transcript_form("K2-A"), Some("key-1")).await;
    assert_eq!((code, body["session_id"].as_str()), (StatusCode::OK, Some("demo-001")), "{body}");
    let (_, list) = api.get("/sessions").await;
    assert_eq!(list.as_array().unwrap().len(), 1, "{list}");
    let (code, _) = api.upload(transcript_form("K2-C"), Some("key-1")).await;
    assert_eq!(code, StatusCode::CONFLICT);
    log.push("same idempotency key twice -> one record; other payload -> 409".into());

    let mut doc: Value = serde_json::from_slice(&support::demo_bytes("transcript_raw.json")).unwrap();
    doc["segments"][2]["start_ms"] = json!("soon");
    let (code, body) = api.upload(Form::new().part("transcript", Part::bytes(serde_json::to_vec(&doc).unwrap())), None).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert!(body["error"]["details"]["path"].as_str().unwrap_or_default().contains("segments[2]"), "{body}");
    let (code, _) = api.upload(Form::new().part("transcript", Part::bytes(b"{\"segments\": [".to_vec())), None).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    log.push("corrupt JSON -> 400 with field path".into());

    let (code, _) = api.post("/sessions/demo-001/run", json!({})).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let s = api.wait_terminal("demo-001").await;
    assert_eq!(s.state, JobState::Done);
    for a in ["raw_transcript", "refined_transcript", "judgments_SSTEW", "judgments_ECQRS-EC", "report"] {
        assert!(s.artifacts.iter().any(|x| x == a), "missing {a} in {:?}", s.artifacts);
    }
    let accessible: usize = support::demo_rubrics().iter().map(|r| r.accessible_indicators().count()).sum();
    assert_eq!((s.progress.indicators_done, s.progress.indicators_total), (accessible, accessible));
    log.push("run -> Done with all artifacts and full counters".into());
    let (code, _) = api.post("/sessions/demo-001/run", json!({})).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = api.post("/sessions/ghost/run", json!({})).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (code, _) = api.get("/sessions/ghost/status").await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    log.push("re-run of a finished session -> 409; unknown id -> 404".into());

    let (report, _) = api.report("demo-001").await;
    let listed: usize = report.scales.iter().flat_map(|s| &s.items).map(|i| i.indicators.len()).sum();
    assert_eq!(listed, accessible);
    log.push("report has one entry per language-accessible indicator".into());
}

async fn contract_failure_and_progress(log: &mut Vec<String>) {
    let llm = Arc::new(support::Scripted::new());
    llm.eval_down.store(true, Ordering::SeqCst);
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(support::pipeline_with(dir.path(), support::backends_with(llm.clone()))).await;
    api.upload(transcript_form("K2-A"), None).await;
    let (code, _) = api.get("/sessions/demo-001/report").await;
    assert_eq!(code, StatusCode::CONFLICT);
    api.post("/sessions/demo-001/run", json!({})).await;
    let s = api.wait_terminal("demo-001").await;
    assert!(matches!(s.state, JobState::Failed { stage: Stage::Evaluating, .. }), "{:?}", s.state);
    assert!(s.artifacts.iter().any(|a| a == "raw_transcript") && s.artifacts.iter().any(|a| a == "refined_transcript"));
    log.push("evaluation outage -> Failed(Evaluating), transcripts kept".into());

    let refines = llm.refine_calls.load(Ordering::SeqCst);
    llm.eval_down.store(false, Ordering::SeqCst);
    let (code, body) = api.post("/sessions/demo-001/run", json!({})).await;
    assert_eq!((code, body["state"].as_str()), (StatusCode::ACCEPTED, Some("evaluating")), "{body}");
    assert_eq!(api.wait_terminal("demo-001").await.state, JobState::Done);
    assert_eq!(llm.refine_calls.load(Ordering::SeqCst), refines);
    log.push("re-run resumes at Evaluating without refining again".into());

    let llm = Arc::new(support::Scripted::paused_after(3));
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(support::pipeline_with(dir.path(), support::backends_with(llm.clone()))).await;
    api.upload(transcript_form("K2-A"), None).await;
    api.post("/sessions/demo-001/run", json!({"scales": ["SSTEW"]})).await;
    let deadline = Instant::now() + Duration::from_secs(10);
    let s = loop {
        let s = api.status("demo-001").await;
        if s.state == JobState::Evaluating && s.progress.indicators_done == 3 {
            break s;
        }
        assert!(Instant::now() < deadline, "never observed mid-evaluation: {s:?}");
        tokio::time::sleep(Duration::from_millis(5)).await;
    };
    assert!(s.progress.indicators_done < s.progress.indicators_total);
    llm.release();
    assert_eq!(api.wait_terminal("demo-001").await.state, JobState::Done);
    log.push("mid-evaluation status -> Evaluating with done < total".into());
}

async fn contract_overrides(log: &mut Vec<String>) {
    let llm = Arc::new(support::Scripted::new());
    llm.hallucinate.lock().unwrap().push("SSTEW.2.L5.1".into());
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(support::pipeline_with(dir.path(), support::backends_with(llm))).await;
    api.upload(transcript_form("K2-A"), None).await;
    api.post("/sessions/demo-001/run", json!({})).await;
    assert_eq!(api.wait_terminal("demo-001").await.state, JobState::Done);

    let (report, _) = api.report("demo-001").await;
    let sstew = report.scales.iter().find(|s| s.scale == Scale::Sstew).unwrap();
    let item2 = sstew.items.iter().find(|i| i.item_id == "2").unwrap();
    let view = item2.indicators.iter().find(|v| v.indicator_id == "SSTEW.2.L5.1").unwrap();
    assert!(view.needs_expert_review && item2.provisional && view.observed);
    assert!(sstew.items.iter().filter(|i| i.item_id != "2").all(|i| !i.provisional));
    log.push("flagged indicator -> needs expert review, item provisional".into());

    let url = "/sessions/demo-001/indicators/SSTEW.2.L5.1/override";
    let (code, _) = api.post(url, json!({"new_observed": false})).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let (code, _) = api.post("/sessions/demo-001/indicators/SSTEW.9.L1.1/override", json!({"new_observed": false, "expert_id": "e1"})).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    log.push("override without expert_id -> 422; unknown indicator -> 404".into());

    let (code, j) = api.post(url, json!({"new_observed": false, "expert_id": "e1", "note": "no such exchange"})).await;
    assert_eq!(code, StatusCode::OK, "{j}");
    assert_eq!((j["validation"].as_str(), j["observed"].as_bool()), (Some("overridden"), Some(false)));
    let (report, text) = api.report("demo-001").await;
    let (score, oracle, provisional) = item_oracle(&report, Scale::Sstew, "2");
    assert_eq!(score, oracle);
    assert!(!provisional);
    assert_eq!(report.indicators_flagged, 0);
    assert_eq!(api.report("demo-001").await.1, text);
    log.push(format!("flagged true->false override -> item 2 rescored to {score} (oracle {oracle}), stable on re-read"));

    let (before, _) = api.report("demo-001").await;
    let before = before.scales.iter().flat_map(|s| &s.items).flat_map(|i| &i.indicators).find(|v| v.indicator_id == "SSTEW.1.L5.1").unwrap().clone();
    assert_eq!(before.validation, Validation::Valid);
    let url = "/sessions/demo-001/indicators/SSTEW.1.L5.1/override";
    for (value, expert) in [(!before.observed, "e2"), (before.observed, "e3")] {
        let (code, _) = api.post(url, json!({"new_observed": value, "expert_id": expert})).await;
        assert_eq!(code, StatusCode::OK);
    }
    let (_, overrides) = api.get("/sessions/demo-001/overrides").await;
    let entries: Vec<&Value> = overrides.as_array().unwrap().iter().filter(|o| o["indicator_id"] == "SSTEW.1.L5.1").collect();
    assert_eq!(entries.len(), 2);
    assert_eq!((entries[0]["prior_validation"].as_str(), entries[0]["prior_observed"].as_bool()), (Some("valid"), Some(before.observed)));
    assert_eq!(overrides.as_array().unwrap().len(), 3);
    let (report, _) = api.report("demo-001").await;
    let after = report.scales.iter().flat_map(|s| &s.items).flat_map(|i| &i.indicators).find(|v| v.indicator_id == "SSTEW.1.L5.1").unwrap();
    assert_eq!((after.observed, after.overridden_by.as_deref()), (before.observed, Some("e3")));
    let (score, oracle, _) = item_oracle(&report, Scale::Sstew, "1");
    assert_eq!(score, oracle);
    log.push("override of a Valid judgment records its prior state; two overrides -> last write wins, both logged".into());
}

async fn contract_rubrics_and_agreement(log: &mut Vec<String>) {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(Pipeline::new(Store::open(dir.path()).unwrap(), support::demo_backends()).unwrap()).await;
    assert_eq!(api.get("/rubrics").await, (StatusCode::OK, json!([])));
    let sstew = support::demo_bytes("rubric_sstew.json");
    let mut dup: Value = serde_json::from_slice(&sstew).unwrap();
    let first = dup["items"][0]["indicators"][0].clone();
    dup["items"][0]["indicators"].as_array_mut().unwrap().push(first);
    let r = api.c.put(api.url("/rubrics/SSTEW")).body(serde_json::to_vec(&dup).unwrap()).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    for name in ["rubric_sstew.json", "rubric_ecqrs.json"] {
        let scale = if name.contains("sstew") { "SSTEW" } else { "ECQRS-EC" };
        let r = api.c.put(api.url(&format!("/rubrics/{scale}"))).body(support::demo_bytes(name)).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK);
    }
    let (_, list) = api.get("/rubrics").await;
    let scales: Vec<&str> = list.as_array().unwrap().iter().map(|r| r["scale"].as_str().unwrap()).collect();
    assert_eq!(scales.len(), 2);
    assert!(scales.contains(&"SSTEW") && scales.contains(&"ECQRS-EC"));
    log.push("empty store -> []; duplicate indicator id -> 422; valid PUT -> 200 and listed".into());

    api.upload(transcript_form("K2-A"), None).await;
    let early = json!({"session_id": "demo-001", "scale": "SSTEW", "assessor_id": "expert", "judgments": {}});
    let (code, body) = api.post("/metrics/agreement", json!({"session_id": "demo-001", "annotation": early})).await;
    assert_eq!(code, StatusCode::CONFLICT, "{body}");
    api.post("/sessions/demo-001/run", json!({})).await;
    assert_eq!(api.wait_terminal("demo-001").await.state, JobState::Done);

    let (report, _) = api.report("demo-001").await;
    let model: BTreeMap<String, bool> = report
        .scales
        .iter()
        .filter(|s| s.scale == Scale::Sstew)
        .flat_map(|s| &s.items)
        .flat_map(|i| &i.indicators)
        .map(|v| (v.indicator_id.clone(), v.observed))
        .collect();
    let annotation = |judgments: &BTreeMap<String, bool>| {
        json!({"session_id": "demo-001", "scale": "SSTEW", "assessor_id": "expert", "judgments": judgments})
    };
    let (code, body) =
        api.post("/metrics/agreement", json!({"session_id": "demo-001", "annotation": annotation(&model), "group_by": "dimension"})).await;
    assert_eq!(code, StatusCode::OK, "{body}");
    for (dim, s) in body["per_group"].as_object().unwrap() {
        assert_eq!((s["kappa"].as_f64(), s["pct_agreement"].as_f64()), (Some(1.0), Some(1.0)), "{dim}");
    }
    log.push("annotation equal to model -> kappa 1.0 per dimension".into());

    let mut one_off = model.clone();
    let v = one_off.get_mut("SSTEW.2.L7.1").unwrap();
    *v = !*v;
    let (_, body) =
        api.post("/metrics/agreement", json!({"session_id": "demo-001", "annotation": annotation(&one_off), "group_by": "dimension"})).await;
    let trust = &body["per_group"]["Building trust"];
    let n: u64 = ["both_true", "model_only", "human_only", "both_false"].iter().map(|k| trust["confusion"][k].as_u64().unwrap()).sum();
    assert_eq!(n, 10);
    assert!((trust["pct_agreement"].as_f64().unwrap() - 0.9).abs() < 1e-12, "{trust}");
    log.push("annotation differing on 1 of 10 -> pct 0.9 for that dimension".into());

    let mut mismatched = model.clone();
    mismatched.remove("SSTEW.1.L3.1");
    mismatched.insert("SSTEW.9.L1.1".into(), true);
    let (code, body) = api.post("/metrics/agreement", json!({"session_id": "demo-001", "annotation": annotation(&mismatched)})).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "key_mismatch");
    assert_eq!(body["error"]["details"]["only_model"], json!(["SSTEW.1.L3.1"]));
    assert!(body["error"]["details"].to_string().contains("SSTEW.9.L1.1"), "{body}");
    log.push("mismatched indicator ids -> 422 listing them".into());
}

fn service_contract() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let mut log = Vec::new();
    rt.block_on(async {
        contract_sessions(&mut log).await;
        contract_failure_and_progress(&mut log).await;
        contract_overrides(&mut log).await;
        contract_rubrics_and_agreement(&mut log).await;
    });
    for line in &log {
        println!("       {line}");
    }
    Ok(format!("{} endpoint examples against a running instance", log.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("scoring oracle", scoring_oracle),
        ("midpoint boundary", midpoint_boundary),
        ("kappa", kappa_criterion),
        ("agreement table overall means", table2_means),
        ("CER oracle", cer_oracle),
        ("error categories", error_categories),
        ("refinement invariants", refinement_invariants),
        ("evidence soundness", evidence_soundness),
        ("end-to-end determinism", end_to_end),
        ("efficiency model", efficiency),
        ("service contract", service_contract),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic.downcast_ref::<String>().cloned().or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        println!("{} of {} criteria failed: {failed:?}", failed.len(), criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
