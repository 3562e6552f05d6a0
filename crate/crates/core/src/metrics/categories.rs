//! Attribution of transcription errors to the five observed categories
//! (plus a catch-all for substitutions that are not known homophones).
//!
//! Gold and hypothesis segments are grouped into connected components of
//! time overlap. Within a component the normalized texts are aligned and
//! every maximal run of one edit kind counts as a single error event:
//! substitution runs covered by a confusable lexicon pair are homophones,
//! other substitution runs are `OtherSubstitution`, insertion runs are
//! `ExtraWords`, deletion runs are `Omission`. Punctuation edits and
//! segment boundary differences count as `PunctuationSegmentation`, and a
//! one-to-one pair with different speakers counts as `SpeakerIdentification`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::lexicon::HomophoneLexicon;
use crate::metrics::cer::{align, EditOp};
use crate::model::{Segment, Transcript};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Homophone,
    ExtraWords,
    SpeakerIdentification,
    PunctuationSegmentation,
    Omission,
    OtherSubstitution,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 6] = [
        ErrorCategory::Homophone,
        ErrorCategory::ExtraWords,
        ErrorCategory::SpeakerIdentification,
        ErrorCategory::PunctuationSegmentation,
        ErrorCategory::Omission,
        ErrorCategory::OtherSubstitution,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCategoryReport {
    pub counts: BTreeMap<ErrorCategory, usize>,
    /// Zero everywhere when `total` is zero.
    pub shares: BTreeMap<ErrorCategory, f64>,
    pub total: usize,
}

impl ErrorCategoryReport {
    pub fn from_counts(mut counts: BTreeMap<ErrorCategory, usize>) -> Self {
        for c in ErrorCategory::ALL {
            counts.entry(c).or_insert(0);
        }
        let total: usize = counts.values().sum();
        let shares = counts
            .iter()
            .map(|(c, n)| (*c, if total == 0 { 0.0 } else { *n as f64 / total as f64 }))
            .collect();
        ErrorCategoryReport { counts, shares, total }
    }

    pub fn count(&self, c: ErrorCategory) -> usize {
        self.counts.get(&c).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CategorizeError {
    #[error("transcripts belong to different sessions ({gold} vs {hyp})")]
    SessionMismatch { gold: String, hyp: String },
}

pub fn categorize_errors(
    gold: &Transcript,
    hyp: &Transcript,
    lexicon: &HomophoneLexicon,
) -> Result<ErrorCategoryReport, CategorizeError> {
    if gold.session_id != hyp.session_id {
        return Err(CategorizeError::SessionMismatch {
            gold: gold.session_id.clone(),
            hyp: hyp.session_id.clone(),
        });
    }
    let pairs = lexicon.confusable_pairs();
    let mut counts = BTreeMap::new();
    let mut bump = |c: ErrorCategory, n: usize| *counts.entry(c).or_insert(0) += n;

    for (g, h) in overlap_components(&gold.segments, &hyp.segments) {
        if g.len() == 1 && h.len() == 1 && g[0].speaker != h[0].speaker {
            bump(ErrorCategory::SpeakerIdentification, 1);
        }
        if !g.is_empty() && !h.is_empty() {
            bump(ErrorCategory::PunctuationSegmentation, g.len().abs_diff(h.len()));
        }

        let joined = |segs: &[&Segment]| segs.iter().map(|s| s.text.as_str()).collect::<String>();
        let (gold_text, hyp_text) = (joined(&g), joined(&h));

        let gp = text::punctuation_marks(&gold_text);
        let hp = text::punctuation_marks(&hyp_text);
        let punct_edits = align(&gp, &hp).iter().filter(|op| !matches!(op, EditOp::Match { .. })).count();
        bump(ErrorCategory::PunctuationSegmentation, punct_edits);

        let gc = text::scoring_chars(&gold_text);
        let hc = text::scoring_chars(&hyp_text);
        for run in edit_runs(&align(&gc, &hc)) {
            let category = match run {
                Run::Insert => ErrorCategory::ExtraWords,
                Run::Delete => ErrorCategory::Omission,
                Run::Substitute { ref_start, hyp_start, len } => {
                    if is_homophone(&gc, &hc, ref_start, hyp_start, len, &pairs) {
                        ErrorCategory::Homophone
                    } else {
                        ErrorCategory::OtherSubstitution
                    }
                }
            };
            bump(category, 1);
        }
    }
    Ok(ErrorCategoryReport::from_counts(counts))
}

type Component<'a> = (Vec<&'a Segment>, Vec<&'a Segment>);

/// Connected components of the gold/hyp time-overlap graph, in time order.
fn overlap_components<'a>(gold: &'a [Segment], hyp: &'a [Segment]) -> Vec<Component<'a>> {
    let n = gold.len();
    let mut parent: Vec<usize> = (0..n + hyp.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, g) in gold.iter().enumerate() {
        for (j, h) in hyp.iter().enumerate() {
            if g.overlaps(h) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, n + j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }

    let mut groups: BTreeMap<usize, Component<'a>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().0.push(&gold[i]);
    }
    for j in 0..hyp.len() {
        let root = find(&mut parent, n + j);
        groups.entry(root).or_default().1.push(&hyp[j]);
    }
    let mut out: Vec<Component<'a>> = groups.into_values().collect();
    let start = |c: &Component<'_>| {
        c.0.iter().chain(&c.1).map(|s| (s.start_ms, s.id.clone())).min()
    };
    out.sort_by_key(|c| start(c));
    for (g, h) in &mut out {
        g.sort_by_key(|s| (s.start_ms, s.id.clone()));
        h.sort_by_key(|s| (s.start_ms, s.id.clone()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Run {
    Substitute { ref_start: usize, hyp_start: usize, len: usize },
    Delete,
    Insert,
}

fn edit_runs(ops: &[EditOp]) -> Vec<Run> {
    let mut runs = Vec::new();
    let mut current: Option<Run> = None;
    for op in ops {
        let next = match *op {
            EditOp::Match { .. } => None,
            EditOp::Substitute { ref_pos, hyp_pos } => match current {
                Some(Run::Substitute { ref_start, hyp_start, len }) => {
                    Some(Run::Substitute { ref_start, hyp_start, len: len + 1 })
                }
                _ => Some(Run::Substitute { ref_start: ref_pos, hyp_start: hyp_pos, len: 1 }),
            },
            EditOp::Delete { .. } => Some(Run::Delete),
            EditOp::Insert { .. } => Some(Run::Insert),
        };
        let continues = matches!(
            (current, next),
            (Some(Run::Substitute { .. }), Some(Run::Substitute { .. }))
                | (Some(Run::Delete), Some(Run::Delete))
                | (Some(Run::Insert), Some(Run::Insert))
        );
        if !continues {
            runs.extend(current);
        }
        current = next;
    }
    runs.extend(current);
    runs
}

/// True when some confusable pair (reference word, hypothesis word) sits at
/// the same offset in both strings and covers the whole substitution run.
fn is_homophone(
    gold: &[char],
    hyp: &[char],
    ref_start: usize,
    hyp_start: usize,
    len: usize,
    pairs: &[(Vec<char>, Vec<char>)],
) -> bool {
    pairs.iter().any(|(rw, hw)| {
        let width = rw.len();
        width >= len
            && (0..=width - len).any(|offset| {
                ref_start >= offset
                    && hyp_start >= offset
                    && gold.get(ref_start - offset..ref_start - offset + width) == Some(rw.as_slice())
                    && hyp.get(hyp_start - offset..hyp_start - offset + width) == Some(hw.as_slice())
            })
    })
}
