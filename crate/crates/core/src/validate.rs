//! Structural checks on transcripts. Violations are returned as data.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{AudioSession, Provenance, Transcript};
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { id: String },
    OutOfOrder { id: String },
    NonPositiveDuration { id: String },
    EmptyText { id: String },
    NotNormalized { id: String },
    ExceedsDuration { id: String, end_ms: u64, duration_ms: u64 },
    /// Refined and raw transcripts do not carry the same segment ids.
    SegmentSetMismatch { missing: Vec<String>, extra: Vec<String> },
    /// Same id set, but a non-text field (or the order) differs.
    StructureMismatch { id: String, field: String },
    SessionMismatch { expected: String, found: String },
    ProvenanceMismatch { expected: Provenance, found: Provenance },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id } => write!(f, "duplicate segment id {id}"),
            Violation::OutOfOrder { id } => write!(f, "segment {id} is out of (start_ms, id) order"),
            Violation::NonPositiveDuration { id } => write!(f, "segment {id} has end_ms <= start_ms"),
            Violation::EmptyText { id } => write!(f, "segment {id} has empty text"),
            Violation::NotNormalized { id } => write!(f, "segment {id} text is not NFC"),
            Violation::ExceedsDuration { id, end_ms, duration_ms } => {
                write!(f, "segment {id} ends at {end_ms} ms past session end {duration_ms} ms")
            }
            Violation::SegmentSetMismatch { missing, extra } => {
                write!(f, "segment set mismatch: missing {missing:?}, extra {extra:?}")
            }
            Violation::StructureMismatch { id, field } => {
                write!(f, "segment {id} differs from its raw parent in {field}")
            }
            Violation::SessionMismatch { expected, found } => {
                write!(f, "session id {found} does not match {expected}")
            }
            Violation::ProvenanceMismatch { expected, found } => {
                write!(f, "provenance {found:?}, expected {expected:?}")
            }
        }
    }
}

/// Checks every segment invariant of `t`, plus the refinement invariant when
/// a raw `parent` is supplied.
pub fn validate_transcript(t: &Transcript, parent: Option<&Transcript>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut prev: Option<(u64, &str)> = None;

    for seg in &t.segments {
        if !seen.insert(seg.id.as_str()) {
            out.push(Violation::DuplicateId { id: seg.id.clone() });
        }
        let key = (seg.start_ms, seg.id.as_str());
        if prev.is_some_and(|p| key < p) {
            out.push(Violation::OutOfOrder { id: seg.id.clone() });
        }
        prev = Some(key);
        if seg.end_ms <= seg.start_ms {
            out.push(Violation::NonPositiveDuration { id: seg.id.clone() });
        }
        if seg.text.trim().is_empty() {
            out.push(Violation::EmptyText { id: seg.id.clone() });
        } else if !text::is_normalized(&seg.text) {
            out.push(Violation::NotNormalized { id: seg.id.clone() });
        }
    }

    if let Some(raw) = parent {
        out.extend(refinement_violations(raw, t));
    }
    out
}

fn refinement_violations(raw: &Transcript, refined: &Transcript) -> Vec<Violation> {
    let mut out = Vec::new();
    if raw.session_id != refined.session_id {
        out.push(Violation::SessionMismatch {
            expected: raw.session_id.clone(),
            found: refined.session_id.clone(),
        });
    }
    if raw.provenance != Provenance::Raw {
        out.push(Violation::ProvenanceMismatch { expected: Provenance::Raw, found: raw.provenance });
    }
    if refined.provenance != Provenance::Refined {
        out.push(Violation::ProvenanceMismatch {
            expected: Provenance::Refined,
            found: refined.provenance,
        });
    }

    let raw_ids: BTreeSet<&str> = raw.segments.iter().map(|s| s.id.as_str()).collect();
    let ref_ids: BTreeSet<&str> = refined.segments.iter().map(|s| s.id.as_str()).collect();
    if raw_ids != ref_ids || raw.segments.len() != refined.segments.len() {
        out.push(Violation::SegmentSetMismatch {
            missing: raw_ids.difference(&ref_ids).map(|s| s.to_string()).collect(),
            extra: ref_ids.difference(&raw_ids).map(|s| s.to_string()).collect(),
        });
        return out;
    }

    for (r, f) in raw.segments.iter().zip(&refined.segments) {
        let field = if r.id != f.id {
            Some("order")
        } else if r.speaker != f.speaker {
            Some("speaker")
        } else if r.start_ms != f.start_ms {
            Some("start_ms")
        } else if r.end_ms != f.end_ms {
            Some("end_ms")
        } else {
            None
        };
        if let Some(field) = field {
            out.push(Violation::StructureMismatch { id: f.id.clone(), field: field.to_owned() });
        }
    }
    out
}

/// Checks that no segment runs past the end of the recording.
pub fn validate_against_session(t: &Transcript, session: &AudioSession) -> Vec<Violation> {
    let mut out = Vec::new();
    if t.session_id != session.session_id {
        out.push(Violation::SessionMismatch {
            expected: session.session_id.clone(),
            found: t.session_id.clone(),
        });
    }
    for seg in &t.segments {
        if seg.end_ms > session.duration_ms {
            out.push(Violation::ExceedsDuration {
                id: seg.id.clone(),
                end_ms: seg.end_ms,
                duration_ms: session.duration_ms,
            });
        }
    }
    out
}
