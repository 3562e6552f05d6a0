//! Unweighted averaging shared by score summaries and agreement tables.

use std::collections::BTreeMap;

/// Arithmetic mean; `None` for an empty input.
pub fn mean<I: IntoIterator<Item = f64>>(values: I) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Groups values by key, averages each group, then averages the group means
/// (macro average). Returns the per-group means and the overall mean.
pub fn macro_average<K, I>(pairs: I) -> (BTreeMap<K, f64>, Option<f64>)
where
    K: Ord,
    I: IntoIterator<Item = (K, f64)>,
{
    let mut groups: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for (k, v) in pairs {
        groups.entry(k).or_default().push(v);
    }
    let per_group: BTreeMap<K, f64> = groups
        .into_iter()
        .filter_map(|(k, vs)| mean(vs).map(|m| (k, m)))
        .collect();
    let overall = mean(per_group.values().copied());
    (per_group, overall)
}
