//! Independent reference implementations used only by tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

/// Item score by literal reading of the scoring rule over a level table
/// `[(level, [observed...])]` given in ascending level order.
pub fn item_score_oracle(levels: &[(u8, Vec<bool>)]) -> u8 {
    let mut best: Option<usize> = None;
    for candidate in 0..levels.len() {
        let all_met_through = levels[..=candidate].iter().all(|(_, vs)| vs.iter().all(|v| *v));
        if all_met_through {
            best = Some(candidate);
        }
    }
    let Some(top) = best else { return 1 };
    let top_level = levels[top].0;
    match levels.get(top + 1) {
        Some((next_level, vs)) => {
            let met = vs.iter().filter(|v| **v).count();
            if met * 2 > vs.len() {
                (top_level + next_level) / 2
            } else {
                top_level
            }
        }
        None => top_level,
    }
}

/// All (substitutions, deletions, insertions) triples achievable by some
/// minimum-cost edit script, plus that minimum cost. Exhaustive over edit
/// scripts, memoized on suffix positions.
pub fn edit_scripts_oracle(a: &[char], b: &[char]) -> (usize, BTreeSet<(usize, usize, usize)>) {
    fn go(
        a: &[char],
        b: &[char],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), (usize, BTreeSet<(usize, usize, usize)>)>,
    ) -> (usize, BTreeSet<(usize, usize, usize)>) {
        if let Some(v) = memo.get(&(i, j)) {
            return v.clone();
        }
        let result = if i == a.len() && j == b.len() {
            (0, BTreeSet::from([(0, 0, 0)]))
        } else {
            let mut options: Vec<(usize, BTreeSet<(usize, usize, usize)>)> = Vec::new();
            if i < a.len() && j < b.len() {
                let (c, set) = go(a, b, i + 1, j + 1, memo);
                if a[i] == b[j] {
                    options.push((c, set));
                } else {
                    options.push((c + 1, set.into_iter().map(|(s, d, n)| (s + 1, d, n)).collect()));
                }
            }
            if i < a.len() {
                let (c, set) = go(a, b, i + 1, j, memo);
                options.push((c + 1, set.into_iter().map(|(s, d, n)| (s, d + 1, n)).collect()));
            }
            if j < b.len() {
                let (c, set) = go(a, b, i, j + 1, memo);
                options.push((c + 1, set.into_iter().map(|(s, d, n)| (s, d, n + 1)).collect()));
            }
            let min = options.iter().map(|(c, _)| *c).min().unwrap();
            let set = options.into_iter().filter(|(c, _)| *c == min).flat_map(|(_, s)| s).collect();
            (min, set)
        };
        memo.insert((i, j), result.clone());
        result
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// Cohen's kappa computed from marginal proportions of the raw label vectors.
/// Returns (p_o, p_e, kappa).
pub fn kappa_oracle(x: &[bool], y: &[bool]) -> (f64, f64, Option<f64>) {
    let n = x.len() as f64;
    let agree = x.iter().zip(y).filter(|(a, b)| a == b).count() as f64;
    let px = x.iter().filter(|v| **v).count() as f64 / n;
    let py = y.iter().filter(|v| **v).count() as f64 / n;
    let p_o = agree / n;
    let p_e = px * py + (1.0 - px) * (1.0 - py);
    let kappa = if (1.0 - p_e).abs() < f64::EPSILON { None } else { Some((p_o - p_e) / (1.0 - p_e)) };
    (p_o, p_e, kappa)
}
