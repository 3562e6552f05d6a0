//! Canonical domain types. Everything here is an immutable value once built.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::text;

/// Free-form key/value metadata with a stable iteration order.
pub type Meta = BTreeMap<String, String>;

/// Diarization role. No speaker identity beyond the role is ever kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerRole {
    Teacher,
    Child,
    Unknown,
}

impl SpeakerRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SpeakerRole::Teacher => "teacher",
            SpeakerRole::Child => "child",
            SpeakerRole::Unknown => "unknown",
        }
    }

    /// Maps an arbitrary backend speaker label onto a role; anything that is
    /// not recognizably a teacher or a child becomes `Unknown`.
    pub fn from_label(label: &str) -> SpeakerRole {
        match label.trim().to_lowercase().as_str() {
            "teacher" | "t" | "adult" | "老师" | "教师" => SpeakerRole::Teacher,
            "child" | "c" | "kid" | "student" | "幼儿" | "儿童" | "孩子" => SpeakerRole::Child,
            _ => SpeakerRole::Unknown,
        }
    }
}

impl fmt::Display for SpeakerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub speaker: SpeakerRole,
    pub start_ms: u64,
    pub end_ms: u64,
    pub text: String,
}

impl Segment {
    pub fn new(
        id: impl Into<String>,
        speaker: SpeakerRole,
        start_ms: u64,
        end_ms: u64,
        text: impl AsRef<str>,
    ) -> Self {
        Segment {
            id: id.into(),
            speaker,
            start_ms,
            end_ms,
            text: text::nfc(text.as_ref()),
        }
    }

    /// Renders the segment the way agents see it: `[id|speaker] text`.
    pub fn render(&self) -> String {
        format!("[{}|{}] {}", self.id, self.speaker, self.text)
    }

    pub fn overlaps(&self, other: &Segment) -> bool {
        self.start_ms < other.end_ms && other.start_ms < self.end_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Raw,
    Refined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub provenance: Provenance,
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub source_meta: Meta,
}

impl Transcript {
    pub fn new(session_id: impl Into<String>, provenance: Provenance, segments: Vec<Segment>) -> Self {
        Transcript {
            session_id: session_id.into(),
            provenance,
            segments,
            source_meta: Meta::new(),
        }
    }

    /// NFC-normalizes every text field and sorts segments by `(start_ms, id)`.
    pub fn normalized(mut self) -> Self {
        for seg in &mut self.segments {
            seg.text = text::nfc(&seg.text);
        }
        self.segments
            .sort_by(|a, b| a.start_ms.cmp(&b.start_ms).then_with(|| a.id.cmp(&b.id)));
        self
    }

    pub fn segment(&self, id: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn segment_index(&self) -> BTreeMap<&str, &Segment> {
        self.segments.iter().map(|s| (s.id.as_str(), s)).collect()
    }

    pub fn max_end_ms(&self) -> Option<u64> {
        self.segments.iter().map(|s| s.end_ms).max()
    }

    pub fn render(&self) -> String {
        self.segments
            .iter()
            .map(Segment::render)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A classroom recording of a given duration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioSession {
    pub session_id: String,
    pub duration_ms: u64,
    #[serde(default)]
    pub classroom_meta: Meta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_uri: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    #[serde(rename = "ECQRS-EC", alias = "ecqrs-ec", alias = "ecqrs")]
    EcqrsEc,
    #[serde(rename = "SSTEW", alias = "sstew")]
    Sstew,
}

impl Scale {
    pub const ALL: [Scale; 2] = [Scale::EcqrsEc, Scale::Sstew];

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::EcqrsEc => "ECQRS-EC",
            Scale::Sstew => "SSTEW",
        }
    }

    /// (items, indicators) declared by a full-configuration rubric file.
    pub fn full_configuration(self) -> (usize, usize) {
        match self {
            Scale::EcqrsEc => (17, 112),
            Scale::Sstew => (14, 94),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown scale {0:?}")]
pub struct UnknownScale(pub String);

impl FromStr for Scale {
    type Err = UnknownScale;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ecqrs-ec" | "ecqrs" | "ecqrs_ec" => Ok(Scale::EcqrsEc),
            "sstew" => Ok(Scale::Sstew),
            _ => Err(UnknownScale(s.to_owned())),
        }
    }
}

/// The four performance levels (inadequate, minimal, good, excellent).
pub const LEVELS: [u8; 4] = [1, 3, 5, 7];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Indicator {
    /// `SCALE.ITEM.Llevel.ordinal`, e.g. `SSTEW.3.L5.2`.
    pub id: String,
    pub scale: Scale,
    pub item_id: String,
    pub level: u8,
    pub description: String,
    #[serde(default)]
    pub positive_examples: Vec<String>,
    #[serde(default)]
    pub negative_examples: Vec<String>,
    pub language_accessible: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricItem {
    pub id: String,
    pub scale: Scale,
    pub dimension: String,
    pub title: String,
    /// Ordered by ascending level.
    pub indicators: Vec<Indicator>,
}

impl RubricItem {
    /// Indicators grouped by level, levels ascending.
    pub fn levels(&self) -> BTreeMap<u8, Vec<&Indicator>> {
        let mut out: BTreeMap<u8, Vec<&Indicator>> = BTreeMap::new();
        for ind in &self.indicators {
            out.entry(ind.level).or_default().push(ind);
        }
        out
    }

    pub fn has_accessible_indicators(&self) -> bool {
        self.indicators.iter().any(|i| i.language_accessible)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rubric {
    pub scale: Scale,
    pub version: String,
    /// When set, the file claims to be the full annotated configuration and
    /// its item and indicator counts are checked on load.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub full_configuration: bool,
    pub items: Vec<RubricItem>,
}

impl Rubric {
    pub fn indicators(&self) -> impl Iterator<Item = &Indicator> {
        self.items.iter().flat_map(|i| i.indicators.iter())
    }

    pub fn accessible_indicators(&self) -> impl Iterator<Item = &Indicator> {
        self.indicators().filter(|i| i.language_accessible)
    }

    pub fn indicator(&self, id: &str) -> Option<&Indicator> {
        self.indicators().find(|i| i.id == id)
    }

    pub fn item(&self, id: &str) -> Option<&RubricItem> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Maps indicator id to the dimension of its item.
    pub fn dimension_of(&self) -> BTreeMap<&str, &str> {
        self.items
            .iter()
            .flat_map(|item| {
                item.indicators
                    .iter()
                    .map(move |ind| (ind.id.as_str(), item.dimension.as_str()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub segment_id: String,
    pub quote: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    Valid,
    FlaggedNoEvidence,
    FlaggedQuoteMismatch,
    /// The model call itself failed; nothing usable was returned.
    FlaggedEvalFailure,
    Overridden,
}

impl Validation {
    pub fn is_flagged(self) -> bool {
        matches!(
            self,
            Validation::FlaggedNoEvidence
                | Validation::FlaggedQuoteMismatch
                | Validation::FlaggedEvalFailure
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorJudgment {
    pub indicator_id: String,
    pub observed: bool,
    #[serde(default)]
    pub evidence: Vec<Evidence>,
    #[serde(default)]
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
    pub validation: Validation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overridden_by: Option<String>,
    #[serde(default)]
    pub model_meta: Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub item_id: String,
    pub score: u8,
    pub satisfied_levels: Vec<u8>,
    pub next_level_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertAnnotation {
    pub session_id: String,
    pub scale: Scale,
    pub assessor_id: String,
    #[serde(with = "binary_map")]
    pub judgments: BTreeMap<String, bool>,
}

/// `{indicator_id: 0|1}` coding for annotation files.
mod binary_map {
    use std::collections::BTreeMap;

    use serde::de::{self, Deserializer};
    use serde::ser::Serializer;
    use serde::{Deserialize, Serialize};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Code {
        Int(u8),
        Bool(bool),
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<String, bool>, s: S) -> Result<S::Ok, S::Error> {
        let coded: BTreeMap<&str, u8> = map.iter().map(|(k, v)| (k.as_str(), u8::from(*v))).collect();
        coded.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, bool>, D::Error> {
        let raw = BTreeMap::<String, Code>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| match v {
                Code::Int(0) | Code::Bool(false) => Ok((k, false)),
                Code::Int(1) | Code::Bool(true) => Ok((k, true)),
                Code::Int(n) => Err(de::Error::custom(format!(
                    "judgment for {k} must be 0 or 1, got {n}"
                ))),
            })
            .collect()
    }
}
