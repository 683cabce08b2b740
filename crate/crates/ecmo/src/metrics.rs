//! Ranking metrics for response selection: R_n@k, MAP, MRR, P@1.
//!
//! Candidates are ordered by a stable descending sort on score, so ties
//! keep their original file order. Lists without a positive are skipped by
//! MAP/MRR/P@1 and rejected by R_n@k, whose protocol demands exactly one
//! positive in exactly n candidates.

use crate::error::{Error, Result};

/// Scores and binary relevance labels for one candidate list.
#[derive(Clone, Debug)]
pub struct RankedList {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl RankedList {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<RankedList> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::EmptySequence("ranked list with no candidates".into()));
        }
        Ok(RankedList { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Labels in rank order: stable descending sort by score.
    fn labels_by_rank(&self) -> Vec<bool> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        order.into_iter().map(|i| self.labels[i]).collect()
    }

    fn has_positive(&self) -> bool {
        self.labels.iter().any(|&l| l)
    }
}

/// Fraction of lists whose positive lands in the top k. Every list must
/// have exactly n candidates and exactly one positive.
pub fn r_at_k(lists: &[RankedList], n: usize, k: usize) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::Contract("r@k over no lists".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Contract(format!("k={k} must be in 1..={n}")));
    }
    let mut hits = 0usize;
    for (i, list) in lists.iter().enumerate() {
        if list.len() != n {
            return Err(Error::Protocol(format!(
                "list {i} has {} candidates, protocol requires {n}",
                list.len()
            )));
        }
        let positives = list.labels.iter().filter(|&&l| l).count();
        if positives != 1 {
            return Err(Error::Protocol(format!(
                "list {i} has {positives} positives, protocol requires exactly 1"
            )));
        }
        if list.labels_by_rank()[..k].iter().any(|&l| l) {
            hits += 1;
        }
    }
    Ok(hits as f64 / lists.len() as f64)
}

/// Average precision of one list: (1/P) Σ_j j / rank_j over its positives.
/// None when the list has no positive.
pub fn average_precision(list: &RankedList) -> Option<f64> {
    if !list.has_positive() {
        return None;
    }
    let ranked = list.labels_by_rank();
    let mut found = 0usize;
    let mut acc = 0.0;
    for (idx, &label) in ranked.iter().enumerate() {
        if label {
            found += 1;
            acc += found as f64 / (idx + 1) as f64;
        }
    }
    Some(acc / found as f64)
}

fn over_lists_with_positives<F>(lists: &[RankedList], f: F) -> Result<f64>
where
    F: Fn(&RankedList) -> f64,
{
    let kept: Vec<&RankedList> = lists.iter().filter(|l| l.has_positive()).collect();
    if kept.is_empty() {
        return Err(Error::Contract("no list has a positive candidate".into()));
    }
    Ok(kept.iter().map(|l| f(l)).sum::<f64>() / kept.len() as f64)
}

/// Mean average precision over lists with at least one positive.
pub fn map(lists: &[RankedList]) -> Result<f64> {
    over_lists_with_positives(lists, |l| average_precision(l).unwrap())
}

/// Mean reciprocal rank of the first positive.
pub fn mrr(lists: &[RankedList]) -> Result<f64> {
    over_lists_with_positives(lists, |l| {
        let rank = l.labels_by_rank().iter().position(|&x| x).unwrap() + 1;
        1.0 / rank as f64
    })
}

/// Fraction of lists whose top candidate is positive.
pub fn p_at_1(lists: &[RankedList]) -> Result<f64> {
    over_lists_with_positives(lists, |l| {
        if l.labels_by_rank()[0] {
            1.0
        } else {
            0.0
        }
    })
}

/// Render a report: one `metric<TAB>value` line per entry plus a trailing
/// machine-readable summary line.
pub fn render_report(entries: &[(String, f64)]) -> String {
    let mut out = String::new();
    for (name, value) in entries {
        out.push_str(&format!("{name}\t{value}\n"));
    }
    let fields: Vec<String> = entries
        .iter()
        .map(|(name, value)| format!("\"{name}\":{value}"))
        .collect();
    out.push_str(&format!("# summary {{{}}}\n", fields.join(",")));
    out
}
