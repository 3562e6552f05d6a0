//! The per-session report document and its plain-text rendering.

use std::collections::BTreeMap;

use i2e_core::metrics::{efficiency_gain, AutomatedTimings, EfficiencyReport, HoursAt, TraditionalTimings, WorkflowTimings};
use i2e_core::{IndicatorJudgment, Rubric, Scale, ScaleSummary, SpeakerRole, Transcript, Validation};
use serde::{Deserialize, Serialize};

use crate::state::{JobRecord, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceView {
    pub segment_id: String,
    pub quote: String,
    pub speaker: Option<SpeakerRole>,
    pub start_ms: Option<u64>,
    pub end_ms: Option<u64>,
    /// Full text of the cited segment, for highlighting the quote in place.
    pub segment_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorView {
    pub indicator_id: String,
    pub level: u8,
    pub description: String,
    pub observed: bool,
    pub validation: Validation,
    pub needs_expert_review: bool,
    pub evidence: Vec<EvidenceView>,
    pub rationale: String,
    pub suggestion: Option<String>,
    pub overridden_by: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub title: String,
    pub dimension: String,
    pub score: u8,
    pub satisfied_levels: Vec<u8>,
    pub next_level_fraction: f64,
    pub provisional: bool,
    pub indicators: Vec<IndicatorView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleView {
    pub scale: Scale,
    pub rubric_version: String,
    pub per_dimension: BTreeMap<String, f64>,
    pub overall_mean: Option<f64>,
    pub items: Vec<ItemView>,
    /// Items without language-accessible indicators; not scored.
    pub excluded_items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub session_id: String,
    pub scales: Vec<ScaleView>,
    pub indicators_total: usize,
    pub indicators_flagged: usize,
}

pub struct ScaleInput<'a> {
    pub rubric: &'a Rubric,
    /// Effective judgments (overrides applied).
    pub judgments: &'a [IndicatorJudgment],
    pub summary: &'a ScaleSummary,
}

pub fn build_report(session_id: &str, transcript: &Transcript, scales: &[ScaleInput<'_>]) -> Report {
    let index = transcript.segment_index();
    let mut total = 0;
    let mut flagged = 0;
    let scales = scales
        .iter()
        .map(|s| {
            let by_id: BTreeMap<&str, &IndicatorJudgment> = s.judgments.iter().map(|j| (j.indicator_id.as_str(), j)).collect();
            let scores: BTreeMap<&str, &i2e_core::ItemScore> =
                s.summary.per_item.iter().map(|i| (i.item_id.as_str(), i)).collect();
            let mut excluded = Vec::new();
            let mut items = Vec::new();
            for item in &s.rubric.items {
                let Some(score) = scores.get(item.id.as_str()) else {
                    excluded.push(item.id.clone());
                    continue;
                };
                let indicators: Vec<IndicatorView> = item
                    .indicators
                    .iter()
                    .filter_map(|ind| by_id.get(ind.id.as_str()).map(|j| (ind, j)))
                    .map(|(ind, j)| {
                        total += 1;
                        let review = j.validation.is_flagged();
                        flagged += usize::from(review);
                        IndicatorView {
                            indicator_id: ind.id.clone(),
                            level: ind.level,
                            description: ind.description.clone(),
                            observed: j.observed,
                            validation: j.validation,
                            needs_expert_review: review,
                            evidence: j
                                .evidence
                                .iter()
                                .map(|e| {
                                    let seg = index.get(e.segment_id.as_str());
                                    EvidenceView {
                                        segment_id: e.segment_id.clone(),
                                        quote: e.quote.clone(),
                                        speaker: seg.map(|s| s.speaker),
                                        start_ms: seg.map(|s| s.start_ms),
                                        end_ms: seg.map(|s| s.end_ms),
                                        segment_text: seg.map(|s| s.text.clone()),
                                    }
                                })
                                .collect(),
                            rationale: j.rationale.clone(),
                            suggestion: j.suggestion.clone(),
                            overridden_by: j.overridden_by.clone(),
                        }
                    })
                    .collect();
                items.push(ItemView {
                    item_id: item.id.clone(),
                    title: item.title.clone(),
                    dimension: item.dimension.clone(),
                    score: score.score,
                    satisfied_levels: score.satisfied_levels.clone(),
                    next_level_fraction: score.next_level_fraction,
                    provisional: s.summary.provisional_items.contains(&item.id),
                    indicators,
                });
            }
            ScaleView {
                scale: s.rubric.scale,
                rubric_version: s.rubric.version.clone(),
                per_dimension: s.summary.per_dimension.clone(),
                overall_mean: s.summary.overall_mean,
                items,
                excluded_items: excluded,
            }
        })
        .collect();
    Report { session_id: session_id.to_owned(), scales, indicators_total: total, indicators_flagged: flagged }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EfficiencyBlock {
    Computed {
        timings: WorkflowTimings,
        #[serde(flatten)]
        report: EfficiencyReport,
        speedup_label: String,
        hours_at_100: HoursAt,
    },
    Unavailable { error: String },
}

/// Compares manual assessment time with this session's recorded stage times:
/// transcription counts as audio processing, refinement as transcription and
/// refinement, and evaluation plus scoring as evaluation and reporting.
pub fn efficiency_block(job: &JobRecord) -> EfficiencyBlock {
    let minutes = |stages: &[Stage]| -> f64 {
        stages.iter().filter_map(|s| job.timings.get(s)).map(|t| t.work_ms as f64 / 60_000.0).sum()
    };
    let timings = WorkflowTimings {
        traditional: TraditionalTimings::default(),
        automated: AutomatedTimings {
            audio_processing_min: minutes(&[Stage::Transcribing]),
            transcribe_refine_min: minutes(&[Stage::Refining]),
            evaluate_report_min: minutes(&[Stage::Evaluating, Stage::Scoring]),
        },
    };
    match efficiency_gain(&timings) {
        Ok(report) => EfficiencyBlock::Computed {
            timings,
            speedup_label: report.render_speedup(),
            hours_at_100: report.hours_at(100),
            report,
        },
        Err(e) => EfficiencyBlock::Unavailable { error: e.to_string() },
    }
}

/// Plain-text summary for administrators.
pub fn render_text(report: &Report) -> String {
    let mut out = format!("Session {}\n", report.session_id);
    out.push_str(&format!(
        "Indicators judged: {}, needing expert review: {}\n",
        report.indicators_total, report.indicators_flagged
    ));
    for s in &report.scales {
        let overall = s.overall_mean.map_or("n/a".to_owned(), |m| format!("{m:.2}"));
        out.push_str(&format!("\n== {} (rubric {}) overall {overall}\n", s.scale, s.rubric_version));
        for (dim, mean) in &s.per_dimension {
            out.push_str(&format!("  {dim}: {mean:.2}\n"));
        }
        for item in &s.items {
            let tag = if item.provisional { " [provisional]" } else { "" };
            out.push_str(&format!("\n  Item {} {}: {}{tag}\n", item.item_id, item.title, item.score));
            for ind in &item.indicators {
                let mark = if ind.observed { "x" } else { " " };
                let review = if ind.needs_expert_review { " (needs expert review)" } else { "" };
                out.push_str(&format!("    [{mark}] {} {}{review}\n", ind.indicator_id, ind.description));
                for e in &ind.evidence {
                    out.push_str(&format!("        \"{}\" ({})\n", e.quote, e.segment_id));
                }
                if let Some(sugg) = &ind.suggestion {
                    out.push_str(&format!("        suggestion: {sugg}\n"));
                }
            }
        }
        if !s.excluded_items.is_empty() {
            out.push_str(&format!("\n  Not assessed from speech: {}\n", s.excluded_items.join(", ")));
        }
    }
    out
}
