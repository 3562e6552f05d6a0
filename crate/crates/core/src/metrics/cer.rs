//! Character error rate over a minimal Levenshtein alignment.

use serde::{Deserialize, Serialize};

use crate::text;

/// What is stripped before scoring. NFC is always applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationPolicy {
    pub strip_whitespace: bool,
    pub strip_punctuation: bool,
}

impl Default for NormalizationPolicy {
    fn default() -> Self {
        NormalizationPolicy { strip_whitespace: true, strip_punctuation: true }
    }
}

impl NormalizationPolicy {
    pub fn apply(&self, s: &str) -> Vec<char> {
        text::nfc(s)
            .chars()
            .filter(|c| !(self.strip_whitespace && c.is_whitespace()))
            .filter(|c| !(self.strip_punctuation && text::is_punctuation(*c)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Match { ref_pos: usize, hyp_pos: usize },
    Substitute { ref_pos: usize, hyp_pos: usize },
    Delete { ref_pos: usize },
    Insert { hyp_pos: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_chars: usize,
    pub cer: f64,
    pub normalization: NormalizationPolicy,
    /// Non-matching operations only, in reference order.
    pub alignment: Vec<EditOp>,
}

impl CerBreakdown {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CerError {
    #[error("reference is empty after normalization")]
    EmptyReference,
}

/// Full alignment (matches included) of `hyp` against `reference`.
///
/// Unit costs. On equal cost the traceback prefers match, then substitution,
/// then deletion, then insertion.
pub fn align(reference: &[char], hyp: &[char]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hyp.len());
    let width = m + 1;
    let mut dist = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        dist[i * width] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dist[(i - 1) * width + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let up = dist[(i - 1) * width + j] + 1;
            let left = dist[i * width + j - 1] + 1;
            dist[i * width + j] = diag.min(up).min(left);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * width + j];
        if i > 0 && j > 0 {
            let diag = dist[(i - 1) * width + j - 1];
            if reference[i - 1] == hyp[j - 1] && here == diag {
                ops.push(EditOp::Match { ref_pos: i - 1, hyp_pos: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
            if here == diag + 1 && reference[i - 1] != hyp[j - 1] {
                ops.push(EditOp::Substitute { ref_pos: i - 1, hyp_pos: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == dist[(i - 1) * width + j] + 1 {
            ops.push(EditOp::Delete { ref_pos: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insert { hyp_pos: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn compute_cer(reference: &str, hyp: &str, policy: NormalizationPolicy) -> Result<CerBreakdown, CerError> {
    let r = policy.apply(reference);
    let h = policy.apply(hyp);
    cer_chars(&r, &h, policy)
}

pub(crate) fn cer_chars(r: &[char], h: &[char], policy: NormalizationPolicy) -> Result<CerBreakdown, CerError> {
    if r.is_empty() {
        return Err(CerError::EmptyReference);
    }
    let ops = align(r, h);
    let (mut s, mut d, mut ins) = (0, 0, 0);
    for op in &ops {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Substitute { .. } => s += 1,
            EditOp::Delete { .. } => d += 1,
            EditOp::Insert { .. } => ins += 1,
        }
    }
    Ok(CerBreakdown {
        substitutions: s,
        deletions: d,
        insertions: ins,
        ref_chars: r.len(),
        cer: (s + d + ins) as f64 / r.len() as f64,
        normalization: policy,
        alignment: ops.into_iter().filter(|op| !matches!(op, EditOp::Match { .. })).collect(),
    })
}

/// Raw vs refined CER for one system, as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CerComparison {
    pub raw_pct: f64,
    pub refined_pct: f64,
    /// refined minus raw, in percentage points (negative is better).
    pub delta_pct: f64,
    /// Relative reduction, in percent of the raw CER.
    pub relative_reduction_pct: f64,
}

impl CerComparison {
    pub fn new(raw_cer: f64, refined_cer: f64) -> Self {
        let raw_pct = raw_cer * 100.0;
        let refined_pct = refined_cer * 100.0;
        let delta_pct = refined_pct - raw_pct;
        let relative_reduction_pct = if raw_pct > 0.0 { -delta_pct / raw_pct * 100.0 } else { 0.0 };
        CerComparison { raw_pct, refined_pct, delta_pct, relative_reduction_pct }
    }

    /// One table row: `raw | refined | delta (↓relative%)`.
    pub fn render_row(&self, label: &str) -> String {
        format!(
            "{label}\t{:.1}\t{:.1}\t{:.1} (\u{2193}{:.1}%)",
            self.raw_pct, self.refined_pct, self.delta_pct, self.relative_reduction_pct
        )
    }
}
