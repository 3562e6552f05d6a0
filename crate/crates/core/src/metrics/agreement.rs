//! Percentage agreement and Cohen's kappa between model and expert
//! indicator judgments.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::aggregate;
use crate::model::{ExpertAnnotation, Rubric};

/// 2×2 contingency counts, model rater first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub both_true: u64,
    pub model_only: u64,
    pub human_only: u64,
    pub both_false: u64,
}

impl Confusion {
    pub fn add(&mut self, model: bool, human: bool) {
        match (model, human) {
            (true, true) => self.both_true += 1,
            (true, false) => self.model_only += 1,
            (false, true) => self.human_only += 1,
            (false, false) => self.both_false += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.both_true + self.model_only + self.human_only + self.both_false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub confusion: Confusion,
    pub p_o: f64,
    pub p_e: f64,
    /// `None` when chance agreement is 1 (both raters constant and equal).
    pub kappa: Option<f64>,
    pub pct_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgreementError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no labels to compare")]
    EmptyInput,
    #[error("indicator sets differ: only in model {only_model:?}, only in annotation {only_human:?}, unknown to rubric {unknown:?}")]
    KeyMismatch {
        only_model: Vec<String>,
        only_human: Vec<String>,
        unknown: Vec<String>,
    },
}

impl AgreementStats {
    pub fn from_confusion(confusion: Confusion) -> Result<Self, AgreementError> {
        let n = confusion.total();
        if n == 0 {
            return Err(AgreementError::EmptyInput);
        }
        let Confusion { both_true: a, model_only: b, human_only: c, both_false: d } = confusion;
        let (a, b, c, d, n) = (a as f64, b as f64, c as f64, d as f64, n as f64);
        let p_o = (a + d) / n;
        let p_e = ((a + b) * (a + c) + (c + d) * (b + d)) / (n * n);
        let kappa = (p_e != 1.0).then(|| (p_o - p_e) / (1.0 - p_e));
        Ok(AgreementStats { confusion, p_o, p_e, kappa, pct_agreement: p_o })
    }
}

/// Cohen's kappa for paired binary labels; `model[i]` and `human[i]` rate the same unit.
pub fn kappa_from_labels(model: &[bool], human: &[bool]) -> Result<AgreementStats, AgreementError> {
    if model.len() != human.len() {
        return Err(AgreementError::LengthMismatch(model.len(), human.len()));
    }
    let mut confusion = Confusion::default();
    for (m, h) in model.iter().zip(human) {
        confusion.add(*m, *h);
    }
    AgreementStats::from_confusion(confusion)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// One group per rubric dimension.
    Dimension,
    /// A single group for the whole scale.
    Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub per_group: BTreeMap<String, AgreementStats>,
    /// Macro mean of defined per-group kappas.
    pub mean_kappa: Option<f64>,
    pub mean_pct_agreement: Option<f64>,
}

/// Compares model judgments to an expert annotation, group by group.
///
/// The two key sets must be identical and known to `rubric`.
pub fn agreement(
    model: &BTreeMap<String, bool>,
    human: &ExpertAnnotation,
    rubric: &Rubric,
    grouping: Grouping,
) -> Result<AgreementReport, AgreementError> {
    let model_keys: BTreeSet<&String> = model.keys().collect();
    let human_keys: BTreeSet<&String> = human.judgments.keys().collect();
    let dimension_of = rubric.dimension_of();
    let unknown: Vec<String> = model_keys
        .union(&human_keys)
        .filter(|k| !dimension_of.contains_key(k.as_str()))
        .map(|k| k.to_string())
        .collect();
    if model_keys != human_keys || !unknown.is_empty() {
        return Err(AgreementError::KeyMismatch {
            only_model: model_keys.difference(&human_keys).map(|k| k.to_string()).collect(),
            only_human: human_keys.difference(&model_keys).map(|k| k.to_string()).collect(),
            unknown,
        });
    }
    if model.is_empty() {
        return Err(AgreementError::EmptyInput);
    }

    let mut confusions: BTreeMap<String, Confusion> = BTreeMap::new();
    for (id, m) in model {
        let group = match grouping {
            Grouping::Dimension => dimension_of[id.as_str()].to_owned(),
            Grouping::Scale => rubric.scale.to_string(),
        };
        confusions.entry(group).or_default().add(*m, human.judgments[id]);
    }
    let per_group = confusions
        .into_iter()
        .map(|(g, c)| AgreementStats::from_confusion(c).map(|s| (g, s)))
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    let (mean_kappa, mean_pct_agreement) = overall_means(per_group.values().map(|s| (s.kappa, s.pct_agreement)));
    Ok(AgreementReport { per_group, mean_kappa, mean_pct_agreement })
}

/// Macro means over per-dimension (kappa, %agreement) rows; undefined kappas are skipped.
pub fn overall_means<I>(rows: I) -> (Option<f64>, Option<f64>)
where
    I: IntoIterator<Item = (Option<f64>, f64)>,
{
    let rows: Vec<_> = rows.into_iter().collect();
    (
        aggregate::mean(rows.iter().filter_map(|(k, _)| *k)),
        aggregate::mean(rows.iter().map(|(_, p)| *p)),
    )
}
