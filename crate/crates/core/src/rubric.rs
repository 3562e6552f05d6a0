//! Rubric loading and item scoring.
//!
//! An item scores at the highest level L reached by cumulative ascent (every
//! indicator at every level up to and including L observed). If strictly more
//! than half of the next level's indicators are also observed, the item scores
//! the midpoint between the two levels. An item with no fully met level
//! scores 1.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::aggregate;
use crate::codec::{self, ParseError};
use crate::model::{Indicator, IndicatorJudgment, ItemScore, Rubric, RubricItem, Scale, LEVELS};
use crate::text;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RubricError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("rubric invariant violation: {}", .0.join("; "))]
    InvariantViolation(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScoringError {
    #[error("no judgment for indicator {0}")]
    MissingJudgment(String),
}

// On-disk shape: indicators may omit `scale` and `item_id`, which are then
// inherited from the enclosing item.
#[derive(Deserialize)]
struct RubricFile {
    scale: Scale,
    version: String,
    #[serde(default)]
    full_configuration: bool,
    items: Vec<ItemFile>,
}

#[derive(Deserialize)]
struct ItemFile {
    id: String,
    #[serde(default)]
    scale: Option<Scale>,
    dimension: String,
    title: String,
    indicators: Vec<IndicatorFile>,
}

#[derive(Deserialize)]
struct IndicatorFile {
    id: String,
    #[serde(default)]
    scale: Option<Scale>,
    #[serde(default)]
    item_id: Option<String>,
    level: u8,
    description: String,
    #[serde(default)]
    positive_examples: Vec<String>,
    #[serde(default)]
    negative_examples: Vec<String>,
    language_accessible: bool,
}

pub fn load_rubric(bytes: &[u8]) -> Result<Rubric, RubricError> {
    let file: RubricFile = codec::parse(bytes)?;
    let mut problems = Vec::new();
    let scale = file.scale;

    let items = file
        .items
        .into_iter()
        .map(|item| {
            if item.scale.is_some_and(|s| s != scale) {
                problems.push(format!("item {} declares a different scale", item.id));
            }
            let indicators = item
                .indicators
                .into_iter()
                .map(|ind| {
                    if ind.scale.is_some_and(|s| s != scale) {
                        problems.push(format!("indicator {} declares a different scale", ind.id));
                    }
                    if ind.item_id.as_ref().is_some_and(|i| *i != item.id) {
                        problems.push(format!("indicator {} names a different item", ind.id));
                    }
                    Indicator {
                        id: ind.id,
                        scale,
                        item_id: item.id.clone(),
                        level: ind.level,
                        description: text::nfc(&ind.description),
                        positive_examples: ind.positive_examples.iter().map(|e| text::nfc(e)).collect(),
                        negative_examples: ind.negative_examples.iter().map(|e| text::nfc(e)).collect(),
                        language_accessible: ind.language_accessible,
                    }
                })
                .collect();
            RubricItem {
                id: item.id,
                scale,
                dimension: text::nfc(&item.dimension),
                title: text::nfc(&item.title),
                indicators,
            }
        })
        .collect();

    let rubric = Rubric {
        scale,
        version: file.version,
        full_configuration: file.full_configuration,
        items,
    };
    problems.extend(check_rubric(&rubric));
    if problems.is_empty() {
        Ok(rubric)
    } else {
        Err(RubricError::InvariantViolation(problems))
    }
}

/// Every structural rubric invariant, one message per violation.
pub fn check_rubric(rubric: &Rubric) -> Vec<String> {
    let mut problems = Vec::new();
    let mut item_ids = BTreeSet::new();
    let mut indicator_ids = BTreeSet::new();

    for item in &rubric.items {
        if !item_ids.insert(item.id.as_str()) {
            problems.push(format!("duplicate item id {}", item.id));
        }
        if item.indicators.is_empty() {
            problems.push(format!("item {} has no indicators", item.id));
        }
        let mut last_level = 0;
        for ind in &item.indicators {
            if !indicator_ids.insert(ind.id.as_str()) {
                problems.push(format!("duplicate indicator id {}", ind.id));
            }
            if !LEVELS.contains(&ind.level) {
                problems.push(format!("indicator {} has level {} (allowed: 1, 3, 5, 7)", ind.id, ind.level));
            } else if ind.level < last_level {
                problems.push(format!("item {} lists levels out of ascending order", item.id));
            }
            last_level = last_level.max(ind.level);
            if !id_matches_scheme(ind, rubric.scale) {
                problems.push(format!(
                    "indicator id {} does not follow {}.{}.L{}.<n>",
                    ind.id, rubric.scale, item.id, ind.level
                ));
            }
        }
    }

    if rubric.full_configuration {
        let (want_items, want_indicators) = rubric.scale.full_configuration();
        let (items, indicators) = (rubric.items.len(), rubric.indicators().count());
        if items != want_items || indicators != want_indicators {
            problems.push(format!(
                "count: full {} configuration needs {want_items} items / {want_indicators} indicators, file has {items} / {indicators}",
                rubric.scale
            ));
        }
    }
    problems
}

fn id_matches_scheme(ind: &Indicator, scale: Scale) -> bool {
    let mut parts = ind.id.rsplitn(3, '.');
    let (Some(ordinal), Some(level), Some(prefix)) = (parts.next(), parts.next(), parts.next()) else {
        return false;
    };
    !ordinal.is_empty()
        && ordinal.bytes().all(|b| b.is_ascii_digit())
        && level == format!("L{}", ind.level)
        && prefix == format!("{}.{}", scale, ind.item_id)
}

pub fn derive_item_score(item: &RubricItem, judgments: &BTreeMap<String, bool>) -> Result<ItemScore, ScoringError> {
    derive_from_levels(&item.id, &item.levels(), judgments)
}

fn derive_from_levels(
    item_id: &str,
    levels: &BTreeMap<u8, Vec<&Indicator>>,
    judgments: &BTreeMap<String, bool>,
) -> Result<ItemScore, ScoringError> {
    // Resolve every judgment up front so a gap surfaces regardless of where
    // the ascent stops.
    let mut observed: Vec<(u8, Vec<bool>)> = Vec::with_capacity(levels.len());
    for (&level, indicators) in levels {
        let values = indicators
            .iter()
            .map(|ind| {
                judgments
                    .get(&ind.id)
                    .copied()
                    .ok_or_else(|| ScoringError::MissingJudgment(ind.id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        observed.push((level, values));
    }

    let reached = observed
        .iter()
        .take_while(|(_, values)| values.iter().all(|v| *v))
        .count();
    let satisfied_levels: Vec<u8> = observed[..reached].iter().map(|(l, _)| *l).collect();

    let next = observed.get(reached);
    let next_level_fraction = next.map_or(0.0, |(_, values)| {
        values.iter().filter(|v| **v).count() as f64 / values.len() as f64
    });

    let score = match (satisfied_levels.last(), next) {
        (None, _) => 1,
        (Some(&top), Some((next_level, values))) if 2 * values.iter().filter(|v| **v).count() > values.len() => {
            (top + next_level) / 2
        }
        (Some(&top), _) => top,
    };

    Ok(ItemScore {
        item_id: item_id.to_owned(),
        score,
        satisfied_levels,
        next_level_fraction,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringInput<'a> {
    pub rubric: &'a Rubric,
    pub judgments: &'a BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub scale: Scale,
    pub per_item: Vec<ItemScore>,
    pub per_dimension: BTreeMap<String, f64>,
    pub overall_mean: Option<f64>,
    /// Items whose score rests on at least one unresolved flagged judgment.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provisional_items: Vec<String>,
}

/// Scores every in-scope item and macro-averages by dimension.
///
/// An item is in scope when it has at least one language-accessible
/// indicator; only those indicators take part in its score.
pub fn score_scale(input: &ScoringInput<'_>) -> Result<ScaleSummary, ScoringError> {
    let mut per_item = Vec::new();
    let mut by_dimension = Vec::new();
    for item in input.rubric.items.iter().filter(|i| i.has_accessible_indicators()) {
        let mut levels: BTreeMap<u8, Vec<&Indicator>> = BTreeMap::new();
        for ind in item.indicators.iter().filter(|i| i.language_accessible) {
            levels.entry(ind.level).or_default().push(ind);
        }
        let score = derive_from_levels(&item.id, &levels, input.judgments)?;
        by_dimension.push((item.dimension.clone(), f64::from(score.score)));
        per_item.push(score);
    }
    let (per_dimension, overall_mean) = aggregate::macro_average(by_dimension);
    Ok(ScaleSummary {
        scale: input.rubric.scale,
        per_item,
        per_dimension,
        overall_mean,
        provisional_items: Vec::new(),
    })
}

/// Judgment values ready for scoring, plus what is still awaiting review.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResolvedJudgments {
    pub values: BTreeMap<String, bool>,
    pub flagged: BTreeSet<String>,
    pub provisional_items: BTreeSet<String>,
}

/// Flagged judgments count as not observed until an expert resolves them;
/// the items they belong to are marked provisional.
pub fn resolve_judgments(rubric: &Rubric, judgments: &[IndicatorJudgment]) -> ResolvedJudgments {
    let mut out = ResolvedJudgments::default();
    for j in judgments {
        let flagged = j.validation.is_flagged();
        out.values.insert(j.indicator_id.clone(), j.observed && !flagged);
        if flagged {
            out.flagged.insert(j.indicator_id.clone());
            if let Some(ind) = rubric.indicator(&j.indicator_id) {
                out.provisional_items.insert(ind.item_id.clone());
            }
        }
    }
    out
}

pub fn score_judgments(rubric: &Rubric, judgments: &[IndicatorJudgment]) -> Result<ScaleSummary, ScoringError> {
    let resolved = resolve_judgments(rubric, judgments);
    let mut summary = score_scale(&ScoringInput { rubric, judgments: &resolved.values })?;
    summary.provisional_items = resolved.provisional_items.into_iter().collect();
    Ok(summary)
}
