//! Per-list ranking and diversity measures. `clicks` and `topics` are in
//! ranked order; `k` larger than the list uses the whole list.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrrConvention {
    /// Mean of `1/rank` over every clicked candidate.
    #[default]
    AllPositives,
    /// `1/rank` of the best-ranked clicked candidate.
    FirstPositive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GiniKind {
    /// `1 - Σ p_t²` over topic shares in the top k.
    #[default]
    Simpson,
    /// One minus the Gini coefficient of top-k topic counts over all topics
    /// present in the slate; 1 means evenly spread.
    Coefficient,
}

pub fn reciprocal_rank(clicks: &[bool], conv: MrrConvention) -> Option<f64> {
    let ranks: Vec<f64> = clicks
        .iter()
        .enumerate()
        .filter(|(_, &c)| c)
        .map(|(i, _)| (i + 1) as f64)
        .collect();
    if ranks.is_empty() {
        return None;
    }
    Some(match conv {
        MrrConvention::AllPositives => ranks.iter().map(|r| 1.0 / r).sum::<f64>() / ranks.len() as f64,
        MrrConvention::FirstPositive => 1.0 / ranks[0],
    })
}

pub fn hit(clicks: &[bool], k: usize) -> Option<f64> {
    if !clicks.contains(&true) {
        return None;
    }
    Some(if clicks.iter().take(k).any(|&c| c) { 1.0 } else { 0.0 })
}

pub fn ndcg(clicks: &[bool], k: usize) -> Option<f64> {
    let positives = clicks.iter().filter(|&&c| c).count();
    if positives == 0 {
        return None;
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = clicks
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &c)| c)
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..positives.min(k)).map(discount).sum();
    Some(dcg / idcg)
}

fn top_counts<'a>(topics: &'a [String], k: usize) -> Vec<(&'a str, usize)> {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for t in topics.iter().take(k) {
        match counts.iter_mut().find(|(name, _)| *name == t.as_str()) {
            Some(e) => e.1 += 1,
            None => counts.push((t, 1)),
        }
    }
    counts
}

pub fn gini(topics: &[String], k: usize, kind: GiniKind) -> f64 {
    let n = topics.len().min(k);
    if n == 0 {
        return 0.0;
    }
    let counts = top_counts(topics, k);
    match kind {
        GiniKind::Simpson => 1.0 - counts.iter().map(|(_, c)| (*c as f64 / n as f64).powi(2)).sum::<f64>(),
        GiniKind::Coefficient => {
            let present: HashSet<&str> = topics.iter().map(String::as_str).collect();
            let lookup: HashMap<&str, usize> = counts.into_iter().collect();
            let mut x: Vec<f64> = present
                .iter()
                .map(|t| lookup.get(t).copied().unwrap_or(0) as f64)
                .collect();
            x.sort_by(|a, b| a.partial_cmp(b).expect("finite counts"));
            let m = x.len() as f64;
            if m < 2.0 {
                return 0.0;
            }
            let total: f64 = x.iter().sum();
            // G = Σ (2i - m - 1) x_i / (m Σ x), i = 1..m over sorted x
            let g: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| (2.0 * (i + 1) as f64 - m - 1.0) * v)
                .sum::<f64>()
                / (m * total);
            1.0 - g * m / (m - 1.0)
        }
    }
}

pub fn topic_count(topics: &[String], k: usize) -> f64 {
    top_counts(topics, k).len() as f64
}

pub fn new_count(topics: &[String], history_topics: &HashSet<String>, k: usize) -> f64 {
    topics.iter().take(k).filter(|t| !history_topics.contains(*t)).count() as f64
}

/// Harmonic mean of accuracy and diversity; zero when either is zero.
pub fn harmonic(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Mean over k ∈ {5, 10} of the harmonic mean of nDCG@k and Gini@k.
pub fn tradeoff(ndcg5: f64, gini5: f64, ndcg10: f64, gini10: f64) -> f64 {
    0.5 * (harmonic(ndcg5, gini5) + harmonic(ndcg10, gini10))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn topics(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn reciprocal_rank_examples() {
        let c = |ranks: &[usize], n: usize| (1..=n).map(|i| ranks.contains(&i)).collect::<Vec<_>>();
        assert_eq!(reciprocal_rank(&c(&[1], 5), MrrConvention::AllPositives), Some(1.0));
        assert_eq!(reciprocal_rank(&c(&[3], 5), MrrConvention::AllPositives), Some(1.0 / 3.0));
        assert_eq!(reciprocal_rank(&c(&[1, 4], 5), MrrConvention::AllPositives), Some(0.625));
        assert_eq!(reciprocal_rank(&c(&[1, 4], 5), MrrConvention::FirstPositive), Some(1.0));
        assert_eq!(reciprocal_rank(&[false, false], MrrConvention::AllPositives), None);
    }

    #[test]
    fn hit_boundaries() {
        assert_eq!(hit(&[false, false, true], 3), Some(1.0));
        assert_eq!(hit(&[false, false, false, true], 3), Some(0.0));
        assert_eq!(hit(&[false], 3), None);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg(&[true, false, false], 5), Some(1.0));
        assert_abs_diff_eq!(ndcg(&[false, true, false], 5).unwrap(), 1.0 / 3f64.log2(), epsilon = 1e-15);
        assert_abs_diff_eq!(ndcg(&[false, true], 5).unwrap(), 0.6309, epsilon = 1e-4);
        assert_eq!(ndcg(&[false, false, true], 2), Some(0.0));
        let list = [false, true, false, true, false, true];
        assert!(ndcg(&list, 3).unwrap() <= ndcg(&list, 5).unwrap());
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&topics(&["a"; 5]), 5, GiniKind::Simpson), 0.0);
        let ten = topics(&["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"]);
        assert_abs_diff_eq!(gini(&ten, 10, GiniKind::Simpson), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(gini(&topics(&["a", "a", "b", "c", "d"]), 5, GiniKind::Simpson), 0.72, epsilon = 1e-15);
        assert_abs_diff_eq!(gini(&ten, 10, GiniKind::Coefficient), 1.0, epsilon = 1e-12);
        let skewed = topics(&["a", "a", "a", "a", "b", "c"]);
        assert!(gini(&skewed, 4, GiniKind::Coefficient) < gini(&skewed, 6, GiniKind::Coefficient));
    }

    #[test]
    fn topic_and_novelty() {
        assert_eq!(topic_count(&topics(&["a", "a", "a"]), 3), 1.0);
        let hist: HashSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(new_count(&topics(&["a", "b", "a"]), &hist, 3), 0.0);
        assert_eq!(new_count(&topics(&["a", "c", "d"]), &HashSet::new(), 3), 3.0);
    }

    #[test]
    fn tradeoff_of_equal_inputs() {
        assert_abs_diff_eq!(tradeoff(0.4, 0.4, 0.6, 0.6), 0.5, epsilon = 1e-15);
        assert_eq!(tradeoff(0.0, 0.5, 0.0, 0.5), 0.0);
    }
}
