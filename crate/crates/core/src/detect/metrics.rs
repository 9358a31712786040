//! Ranking metrics over detector scores.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{DetectError, DetectorOutput};

/// Fraction of (free rider, honest) pairs where the free rider scores
/// higher, ties counted one half.
pub fn auc(output: &DetectorOutput, free_riders: &BTreeSet<usize>) -> Result<f64, DetectError> {
    let labels: Vec<bool> = output.client_ids.iter().map(|c| free_riders.contains(c)).collect();
    auc_from_labels(&output.scores, &labels)
}

/// AUC from parallel score/label slices (`true` marks a positive).
///
/// Counts are accumulated in integers, so the result is exactly
/// `(2·wins + ties) / (2·P·N)` with a single final rounding.
pub fn auc_from_labels(scores: &[f64], labels: &[bool]) -> Result<f64, DetectError> {
    if scores.len() != labels.len() {
        return Err(DetectError::LabelMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(DetectError::OneClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let (mut wins, mut ties, mut neg_below) = (0u128, 0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0u128, 0u128);
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            if labels[order[j]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        wins += pos_here * neg_below;
        ties += pos_here * neg_here;
        neg_below += neg_here;
        i = j;
    }
    let denom = 2 * positives as u128 * negatives as u128;
    Ok((2 * wins + ties) as f64 / denom as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub client_id: usize,
    pub score: f64,
    /// 1 is the most suspicious.
    pub rank: usize,
    pub flagged: bool,
    pub is_free_rider: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    /// Sorted by rank.
    pub entries: Vec<RankEntry>,
    pub top_k: usize,
    pub true_positives: usize,
    pub false_positives: usize,
}

impl RankReport {
    pub fn rank_of(&self, client_id: usize) -> Option<usize> {
        self.entries.iter().find(|e| e.client_id == client_id).map(|e| e.rank)
    }
}

/// Ranks clients by descending score (ties broken by client id) and flags
/// the top `k`.
pub fn rank_report(output: &DetectorOutput, free_riders: &BTreeSet<usize>, k: usize) -> RankReport {
    let mut idx: Vec<usize> = (0..output.scores.len()).collect();
    idx.sort_by(|&a, &b| {
        output.scores[b]
            .total_cmp(&output.scores[a])
            .then(output.client_ids[a].cmp(&output.client_ids[b]))
    });
    let entries: Vec<RankEntry> = idx
        .into_iter()
        .enumerate()
        .map(|(pos, i)| RankEntry {
            client_id: output.client_ids[i],
            score: output.scores[i],
            rank: pos + 1,
            flagged: pos < k,
            is_free_rider: free_riders.contains(&output.client_ids[i]),
        })
        .collect();
    let true_positives = entries.iter().filter(|e| e.flagged && e.is_free_rider).count();
    let false_positives = entries.iter().filter(|e| e.flagged && !e.is_free_rider).count();
    RankReport {
        entries,
        top_k: k,
        true_positives,
        false_positives,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::DetectorKind;

    fn output(scores: Vec<f64>) -> DetectorOutput {
        DetectorOutput {
            kind: DetectorKind::Dagmm,
            round: 5,
            client_ids: (0..scores.len()).collect(),
            scores,
            losses: vec![],
        }
    }

    #[test]
    fn hand_cases() {
        assert_eq!(auc_from_labels(&[2.0, 3.0, 1.0], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auc_from_labels(&[1.0, 2.0], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc_from_labels(&[3.0, 1.0, 2.0, 0.0], &[true, true, false, false]).unwrap(), 0.75);
        assert_eq!(auc_from_labels(&[1.0, 1.0], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn one_class_rejected() {
        assert_eq!(
            auc_from_labels(&[1.0, 2.0], &[true, true]).unwrap_err(),
            DetectError::OneClass {
                positives: 2,
                negatives: 0
            }
        );
    }

    #[test]
    fn ranks_and_flags() {
        let out = output(vec![0.1, 0.9, 0.5, 0.9]);
        let truth: BTreeSet<usize> = [1].into();
        let r = rank_report(&out, &truth, 1);
        assert_eq!(r.rank_of(1), Some(1));
        assert_eq!(r.rank_of(3), Some(2));
        assert_eq!((r.true_positives, r.false_positives), (1, 0));
        let none = rank_report(&out, &truth, 0);
        assert!(none.entries.iter().all(|e| !e.flagged));
    }

    #[test]
    fn perfect_ranking_flags_every_free_rider() {
        let scores: Vec<f64> = (0..100).map(|i| if i < 20 { 10.0 + i as f64 } else { i as f64 / 100.0 }).collect();
        let truth: BTreeSet<usize> = (0..20).collect();
        let out = output(scores);
        assert_eq!(auc(&out, &truth).unwrap(), 1.0);
        let r = rank_report(&out, &truth, 20);
        assert_eq!((r.true_positives, r.false_positives), (20, 0));
    }
}
