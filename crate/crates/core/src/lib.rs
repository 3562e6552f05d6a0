//! Domain model, rubric scoring and evaluation metrics for audio-based
//! assessment of teacher-child interaction quality.

pub mod aggregate;
pub mod codec;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod rubric;
pub mod text;
pub mod validate;

pub use codec::{canonical_serialize, canonical_string, parse, ParseError};
pub use lexicon::{HomophoneLexicon, LexiconEntry};
pub use model::*;
pub use rubric::{
    derive_item_score, load_rubric, resolve_judgments, score_judgments, score_scale, RubricError,
    ScaleSummary, ScoringError, ScoringInput,
};
pub use validate::{validate_against_session, validate_transcript, Violation};
